//! Sample generation and metric computation over a trained checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidpred::data::{preprocess, split_condition_target, VideoClip};
use vidpred::derive_seed;
use vidpred::metrics::{
    best_of_l_ssim, copy_baseline, fvd, generate_samples, inception_score, nested_latents, ssim_curve, Embedder,
};
use vidpred::trainer::{Model, Trainer};
use vidpred::{Mode, Params};
use vidpred_tensor::Tensor;

use crate::{CliResult, MetricConfig};

const GEN_BATCH: usize = 32;

/// `n` real videos `[n, T, 3, res, res]`; video `i` is a random window and
/// crop of clip `i mod len` drawn from `derive_seed(seed, [i])`.
pub fn real_videos(clips: &[VideoClip], n: usize, res: usize, frames: usize, seed: u64) -> CliResult<Tensor<f32>> {
    if clips.is_empty() {
        return Err(vidpred::Error::Invalid("no clips to evaluate on".into()).into());
    }
    let parts = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            let v: Tensor<f32> = preprocess(&clips[i % clips.len()], res, frames, &mut rng)?;
            Ok(v.into_reshaped(&[1, frames, 3, res, res])?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

/// Continuations of every conditioning clip in `cond`, generated in
/// batches; clip `i` uses latent row `i` of `nested_latents(seed)`.
pub fn predict(
    model: &Model<f32>,
    params: &Params<f32>,
    cond: &Tensor<f32>,
    truncation: Option<f64>,
    seed: u64,
) -> CliResult<Tensor<f32>> {
    let n = cond.shape()[0];
    let z: Tensor<f32> = nested_latents(n, model.gen.cfg.latent, seed, truncation)?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = GEN_BATCH.min(n - start);
        // Batch norm runs on standing statistics in eval mode, so batching
        // does not change any sample.
        let out = model.generate(params, &cond.narrow(0, start, len)?, &z.narrow(0, start, len)?, Mode::Eval)?;
        parts.push(out);
        start += len;
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub samples: usize,
    pub fvd: Option<f64>,
    pub is: Option<f64>,
    pub copy_fvd: Option<f64>,
    /// Mean per-frame SSIM curves keyed `best_of_<ℓ>` and `copy`.
    pub ssim_curves: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wanted {
    pub fvd: bool,
    pub is: bool,
    pub copy: bool,
    pub ssim: bool,
}

impl Wanted {
    pub const ALL: Wanted = Wanted {
        fvd: true,
        is: true,
        copy: true,
        ssim: true,
    };

    pub fn parse(list: &str) -> Result<Self, String> {
        let mut w = Wanted {
            fvd: false,
            is: false,
            copy: false,
            ssim: false,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "fvd" => w.fvd = true,
                "is" => w.is = true,
                "copy" => w.copy = true,
                "ssim" => w.ssim = true,
                "all" => w = Wanted::ALL,
                other => return Err(format!("unknown metric {other:?}; expected fvd, is, copy, ssim or all")),
            }
        }
        Ok(w)
    }
}

/// Evaluates the EMA generator of `tr` (with standing statistics gathered
/// on `clips`) against real videos cut from `clips`.
pub fn evaluate(
    tr: &Trainer<f32>,
    clips: &[VideoClip],
    embedder: Option<&Embedder>,
    m: &MetricConfig,
    want: Wanted,
) -> CliResult<EvalReport> {
    let params = tr.eval_params(clips)?;
    evaluate_params(&tr.model, &params, tr.cfg.truncation, tr.step, clips, embedder, m, want)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_params(
    model: &Model<f32>,
    params: &Params<f32>,
    truncation: f64,
    step: u64,
    clips: &[VideoClip],
    embedder: Option<&Embedder>,
    m: &MetricConfig,
    want: Wanted,
) -> CliResult<EvalReport> {
    let g = &model.gen.cfg;
    let (res, frames) = (g.resolution(), g.frames());
    let real = real_videos(clips, m.samples, res, frames, m.seed)?;
    let (cond, _) = split_condition_target(&real, g.t_cond)?;
    let mut report = EvalReport {
        step,
        samples: m.samples,
        ..EvalReport::default()
    };
    if want.fvd || want.is {
        let emb = embedder.ok_or_else(|| vidpred::Error::Invalid("FVD and IS need an embedder".into()))?;
        let pred = predict(model, params, &cond, Some(truncation), derive_seed(m.seed, &[1]))?;
        let fake = Tensor::concat(&[&cond, &pred], 1)?;
        if want.fvd {
            report.fvd = Some(fvd(&real, &fake, emb)?);
        }
        if want.is {
            report.is = Some(inception_score(&emb.embed(&fake)?)?);
        }
    }
    if want.copy {
        let emb = embedder.ok_or_else(|| vidpred::Error::Invalid("the copy baseline FVD needs an embedder".into()))?;
        let copy = Tensor::concat(&[&cond, &copy_baseline(&cond, g.t_out)?], 1)?;
        report.copy_fvd = Some(fvd(&real, &copy, emb)?);
    }
    if want.ssim {
        report.ssim_curves = ssim_curves(model, params, truncation, &real, m)?;
    }
    Ok(report)
}

fn ssim_curves(
    model: &Model<f32>,
    params: &Params<f32>,
    truncation: f64,
    real: &Tensor<f32>,
    m: &MetricConfig,
) -> CliResult<BTreeMap<String, Vec<f64>>> {
    let g = &model.gen.cfg;
    let n = m.ssim_clips.min(real.shape()[0]);
    let l_max = m.best_of.iter().copied().max().unwrap_or(1);
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut add = |key: String, curve: Vec<f64>| {
        let acc = sums.entry(key).or_insert_with(|| vec![0.0; curve.len()]);
        for (a, c) in acc.iter_mut().zip(curve) {
            *a += c / n as f64;
        }
    };
    for i in 0..n {
        let clip = real.narrow(0, i, 1)?;
        let (cond, truth) = split_condition_target(&clip, g.t_cond)?;
        let truth = truth.reshape(&truth.shape()[1..])?;
        let samples = generate_samples(model, params, &cond, l_max, derive_seed(m.seed, &[2, i as u64]), Some(truncation))?;
        for &l in &m.best_of {
            let curve = best_of_l_ssim(
                |j| Ok(samples.narrow(0, j, 1)?.reshape(&samples.shape()[1..])?),
                &truth,
                l,
            )?;
            add(format!("best_of_{l}"), curve);
        }
        let copy = copy_baseline(&cond, g.t_out)?;
        add("copy".into(), ssim_curve(&copy.reshape(&copy.shape()[1..])?, &truth)?);
    }
    Ok(sums)
}

/// Loads the configured embedder, else the one cached at `cache`, else
/// trains one (saving it to `cache` when given).
pub fn obtain_embedder(m: &MetricConfig, cache: Option<&Path>) -> CliResult<Embedder> {
    if let Some(dir) = &m.embedder_dir {
        return Ok(Embedder::load(dir)?);
    }
    if let Some(dir) = cache {
        if dir.join(vidpred::bundle::MANIFEST).exists() {
            let emb = Embedder::load(dir)?;
            if emb.cfg == m.embedder {
                return Ok(emb);
            }
            log::info!("cached embedder at {} has a different configuration; retraining", dir.display());
        }
    }
    log::info!("training the FVD embedder ({} clips, {} epochs)", m.embedder.train_clips, m.embedder.epochs);
    let (emb, rep) = Embedder::train(m.embedder.clone())?;
    log::info!("embedder held-out accuracy {:.3}", rep.accuracy);
    if let Some(dir) = cache {
        emb.save(dir)?;
    }
    Ok(emb)
}
