//! One function per subcommand. Each returns the JSON summary line.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use image::{Rgb, RgbImage};
use serde_json::{json, Value};
use vidpred::bundle::write_bundle;
use vidpred::data::{from_unit_range, save_dataset, split_condition_target, synth_generate, SynthSpec};
use vidpred::flow::{kernels_to_flow_batch, multiscale_combine, save_flow_png, FlowField};
use vidpred::metrics::bench_step;
use vidpred::trainer::{fit, FitOptions, Trainer, MANIFEST};
use vidpred::{derive_seed, Cx, Mode};
use vidpred_tensor::Tensor;

use crate::eval::{evaluate, obtain_embedder, predict, real_videos, Wanted};
use crate::{run_config_for, CliError, CliResult, RunConfig, RUN_FILE};

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// JSON file with a synthetic dataset spec; defaults apply otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<Value> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(r) = a.resolution {
        spec.resolution = r;
    }
    if let Some(f) = a.frames {
        spec.frames = f;
    }
    spec.validate()?;
    let clips = synth_generate(&spec, a.seed, a.n)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_dataset(&a.out, &clips)?;
    Ok(json!({
        "command": "gen-data",
        "clips": clips.len(),
        "classes": spec.num_classes(),
        "bytes": fs::metadata(&a.out)?.len(),
        "out": a.out,
    }))
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Continue from `<out-dir>/checkpoint` if present.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Stop early (with a checkpoint) after this many total steps.
    #[arg(long)]
    pub stop_at: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

pub fn load_run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn train(a: &TrainArgs, deterministic: bool) -> CliResult<Value> {
    let mut cfg = load_run_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = &a.dataset {
        cfg.data.dataset = Some(d.clone());
    }
    if deterministic {
        cfg.train.deterministic = true;
    }
    cfg.validate()?;
    let clips = cfg.train_clips()?;
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join(RUN_FILE), serde_json::to_string_pretty(&cfg)?)?;

    let mut opts = FitOptions::<f32> {
        resume: a.resume,
        stop_at: a.stop_at,
        eval: None,
    };
    if cfg.train.eval_every > 0 {
        let emb = obtain_embedder(&cfg.metrics, Some(&a.out_dir.join("embedder")))?;
        let metrics = cfg.metrics.clone();
        let want = Wanted {
            fvd: true,
            is: false,
            copy: false,
            ssim: false,
        };
        opts.eval = Some(Box::new(move |tr: &Trainer<f32>, clips: &[vidpred::data::VideoClip]| {
            let r = evaluate(tr, clips, Some(&emb), &metrics, want).map_err(|e| match e {
                CliError::Run(e) => e,
                CliError::Usage(m) => vidpred::Error::Invalid(m),
            })?;
            Ok(r.fvd.unwrap_or(f64::INFINITY))
        }));
    }
    let report = fit(&cfg.train, &clips, &a.out_dir, opts)?;
    Ok(json!({
        "command": "train",
        "steps": report.steps,
        "steps_this_run": report.steps_this_run,
        "last": report.last,
        "best_eval": report.best_eval,
        "mean_step_secs": report.mean_step_secs,
        "checkpoint": report.checkpoint,
    }))
}

fn load_checkpoint(dir: &Path) -> CliResult<Trainer<f32>> {
    if !dir.join(MANIFEST).exists() {
        return Err(vidpred::Error::Invalid(format!("no checkpoint at {}", dir.display())).into());
    }
    Ok(Trainer::load_checkpoint(dir)?)
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration; defaults to `run.json` beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation clips; defaults to the synthetic held-out split.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated subset of fvd, is, copy, ssim.
    #[arg(long, default_value = "all")]
    pub metrics: String,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Embedder directory: loaded when present, written after training otherwise.
    #[arg(long)]
    pub embedder: Option<PathBuf>,
    /// Where to write the full report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs) -> CliResult<Value> {
    let want = Wanted::parse(&a.metrics).map_err(CliError::Usage)?;
    let tr = load_checkpoint(&a.checkpoint)?;
    let mut cfg = run_config_for(&a.checkpoint, a.config.as_deref(), &tr.cfg)?;
    if let Some(n) = a.samples {
        cfg.metrics.samples = n;
    }
    cfg.validate()?;
    let clips = cfg.eval_clips(a.dataset.as_deref())?;
    let emb = if want.fvd || want.is || want.copy {
        Some(obtain_embedder(&cfg.metrics, a.embedder.as_deref())?)
    } else {
        None
    };
    let report = evaluate(&tr, &clips, emb.as_ref(), &cfg.metrics, want)?;
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    let mut v = serde_json::to_value(&report)?;
    v["command"] = json!("eval");
    Ok(v)
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Latent truncation threshold; the checkpoint's setting by default.
    #[arg(long)]
    pub truncation: Option<f64>,
    #[arg(long)]
    pub grid_out: PathBuf,
    /// Rows in the grid, one conditioning clip each.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

/// Lays `[N, T, 3, H, W]` out as N rows of T frames.
pub fn video_grid(v: &Tensor<f32>) -> CliResult<RgbImage> {
    let &[n, t, c, h, w] = v.shape() else {
        return Err(vidpred::Error::Invalid(format!("expected [N, T, 3, H, W], got {:?}", v.shape())).into());
    };
    if c != 3 {
        return Err(vidpred::Error::Invalid(format!("expected 3 channels, got {c}")).into());
    }
    let d = v.data();
    Ok(RgbImage::from_fn((t * w) as u32, (n * h) as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let (row, i, col, j) = (y / h, y % h, x / w, x % w);
        let px = |ch: usize| from_unit_range(d[(((row * t + col) * 3 + ch) * h + i) * w + j]);
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn sample(a: &SampleArgs) -> CliResult<Value> {
    let tr = load_checkpoint(&a.checkpoint)?;
    let cfg = run_config_for(&a.checkpoint, a.config.as_deref(), &tr.cfg)?;
    cfg.validate()?;
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let truncation = a.truncation.unwrap_or(tr.cfg.truncation);
    if truncation.is_nan() || truncation < 0.0 {
        return Err(CliError::Usage(format!("truncation {truncation} must be ≥ 0")));
    }
    let clips = cfg.eval_clips(a.dataset.as_deref())?;
    let g = &tr.cfg.generator;
    let real = real_videos(&clips, a.n, g.resolution(), g.frames(), derive_seed(a.seed, &[0]))?;
    let (cond, _) = split_condition_target(&real, g.t_cond)?;
    let params = tr.eval_params(&clips)?;
    let pred = predict(&tr.model, &params, &cond, Some(truncation), derive_seed(a.seed, &[1]))?;
    let video = Tensor::concat(&[&cond, &pred], 1)?;
    if let Some(dir) = a.grid_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let grid = video_grid(&video)?;
    grid.save(&a.grid_out).map_err(vidpred::Error::from)?;
    Ok(json!({
        "command": "sample",
        "rows": a.n,
        "frames": g.frames(),
        "truncation": truncation,
        "grid": a.grid_out,
        "size": [grid.width(), grid.height()],
    }))
}

#[derive(Args, Debug, Clone)]
pub struct FlowArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index of the conditioning clip in the evaluation split.
    #[arg(long, default_value_t = 0)]
    pub clip: usize,
    /// Number of coarsest recurrent levels to combine.
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

/// Per-step flow fields of every warping level for one conditioning clip:
/// `result[t][level]`.
pub fn generator_flows(tr: &Trainer<f32>, params: &vidpred::Params<f32>, cond: &Tensor<f32>, seed: u64) -> CliResult<Vec<Vec<FlowField>>> {
    let g = &tr.model.gen.cfg;
    let z: Tensor<f32> = vidpred::metrics::nested_latents(1, g.latent, seed, Some(tr.cfg.truncation))?;
    let mut cx = Cx::new(params, Mode::Eval, None);
    let (c, zv) = (cx.constant(cond.clone()), cx.constant(z));
    let out = tr.model.gen.forward(&mut cx, zv, c)?;
    if out.warps.iter().all(Vec::is_empty) {
        return Err(vidpred::Error::Invalid(format!("the {} unit predicts no warps", g.unit)).into());
    }
    let steps = out.warps[0].len();
    (0..steps)
        .map(|t| {
            out.warps
                .iter()
                .map(|level| Ok(kernels_to_flow_batch(cx.value(level[t]))?.remove(0)))
                .collect()
        })
        .collect()
}

pub fn flow(a: &FlowArgs) -> CliResult<Value> {
    let tr = load_checkpoint(&a.checkpoint)?;
    let cfg = run_config_for(&a.checkpoint, a.config.as_deref(), &tr.cfg)?;
    cfg.validate()?;
    let g = &tr.cfg.generator;
    if a.levels == 0 || a.levels > g.stages {
        return Err(CliError::Usage(format!("--levels must lie in 1..={}", g.stages)));
    }
    let clips = cfg.eval_clips(a.dataset.as_deref())?;
    if a.clip >= clips.len() {
        return Err(CliError::Usage(format!("--clip {} outside the {} evaluation clips", a.clip, clips.len())));
    }
    let real = real_videos(&clips[a.clip..=a.clip], 1, g.resolution(), g.frames(), derive_seed(a.seed, &[0]))?;
    let (cond, _) = split_condition_target(&real, g.t_cond)?;
    let params = tr.eval_params(&clips)?;
    let flows = generator_flows(&tr, &params, &cond, derive_seed(a.seed, &[1]))?;
    fs::create_dir_all(&a.out)?;
    let mut records: Vec<(String, Tensor<f64>)> = Vec::new();
    let mut mean_mag = Vec::new();
    for (t, levels) in flows.iter().enumerate() {
        let combined = multiscale_combine(&levels[..a.levels])?;
        save_flow_png(&combined, &a.out.join(format!("flow_t{t}.png")))?;
        for (l, f) in levels.iter().enumerate() {
            records.push((format!("t{t}/level{l}"), f.vectors.clone()));
        }
        let mags: f64 = combined.vectors.data().chunks(2).map(|v| v[0].hypot(v[1])).sum();
        mean_mag.push(mags / (combined.height() * combined.width()) as f64);
        records.push((format!("t{t}/combined"), combined.vectors));
    }
    let refs: Vec<(String, &Tensor<f64>)> = records.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_bundle(&a.out.join("fields"), &json!({"kind": "flow", "levels": a.levels}), &refs)?;
    Ok(json!({
        "command": "flow",
        "steps": flows.len(),
        "levels": a.levels,
        "mean_magnitude": mean_mag,
        "out": a.out,
    }))
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    pub seconds: f64,
    /// Comma-separated decomposition presets; the configured one by default.
    #[arg(long)]
    pub decompositions: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub min_steps: usize,
}

pub fn bench(a: &BenchArgs) -> CliResult<Value> {
    let cfg = load_run_config(a.config.as_deref())?;
    cfg.validate()?;
    if !(a.seconds >= 0.0 && a.seconds.is_finite()) {
        return Err(CliError::Usage(format!("--seconds {} must be finite and non-negative", a.seconds)));
    }
    let names: Vec<String> = match &a.decompositions {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => vec![cfg.train.decomposition.clone()],
    };
    let g = &cfg.train.generator;
    let spec = SynthSpec {
        resolution: g.resolution(),
        frames: g.frames(),
        ..cfg.data.spec.clone()
    };
    let clips = synth_generate(&spec, cfg.data.seed, cfg.train.batch.max(spec.num_classes()))?;
    let mut reports = Vec::new();
    for name in names {
        let mut tc = cfg.train.clone();
        tc.decomposition = name;
        tc.validate()?;
        reports.push(bench_step::<f32>(&tc, &clips, Duration::from_secs_f64(a.seconds), a.min_steps)?);
    }
    Ok(json!({"command": "bench", "seconds": a.seconds, "results": reports}))
}
