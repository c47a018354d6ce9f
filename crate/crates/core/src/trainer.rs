//! Adversarial training: Adam, alternating updates, EMA generator weights,
//! truncated sampling and checkpoints.
//!
//! Every random draw of step `s` comes from a generator seeded by
//! `derive_seed(seed, [stream, s, ...])`, so a run is a pure function of its
//! configuration and the step counter; resuming needs no RNG state beyond it.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vidpred_tensor::{Real, Tensor};

pub use crate::bundle::{MANIFEST, TENSORS};
use crate::bundle::{read_bundle, write_bundle};
use crate::data::{make_batch, VideoClip};
use crate::error::{invalid, Error, Result};
use crate::layers::{orthogonality_penalty, standing_statistics};
use crate::nets::{DecompositionConfig, Discriminator, FrameSource, Generator, GeneratorConfig};
use crate::objectives::{g_loss, hinge_d_loss, project_all, ProjectionHead};
use crate::params::{derive_seed, Cx, Group, Init, Kind, Mode, ParamId, Params};

fn default_frames_from() -> FrameSource {
    FrameSource::Full
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub d_steps: usize,
    pub ema_decay: f64,
    pub ema_start: u64,
    pub steps: u64,
    pub ortho_beta: f64,
    pub truncation: f64,
    pub d_ch: usize,
    /// Preset name, see [`crate::nets::PRESETS`].
    pub decomposition: String,
    #[serde(default = "default_frames_from")]
    pub frames_from: FrameSource,
    /// Overrides the preset's number of sampled frames `K`.
    #[serde(default)]
    pub view_frames: Option<usize>,
    pub head: ProjectionHead,
    pub generator: GeneratorConfig,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Train-set FVD every this many steps; 0 disables.
    pub eval_every: u64,
    pub standing_batches: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            data_seed: 1,
            batch: 16,
            lr_g: 1e-4,
            lr_d: 5e-4,
            beta1: 0.0,
            beta2: 0.999,
            adam_eps: 1e-8,
            d_steps: 2,
            ema_decay: 0.999,
            ema_start: 1000,
            steps: 20_000,
            ortho_beta: 1e-4,
            truncation: 0.8,
            d_ch: 16,
            decomposition: "stronger".into(),
            frames_from: FrameSource::Full,
            view_frames: None,
            head: ProjectionHead::Mixed,
            generator: GeneratorConfig::default(),
            log_every: 10,
            checkpoint_every: 1000,
            eval_every: 0,
            standing_batches: 16,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch < 2 {
            return bad(format!("batch {} is too small for batch norm", self.batch));
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0 && self.lr_g.is_finite() && self.lr_d.is_finite()) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam needs β₁, β₂ ∈ [0, 1) and ε > 0".into());
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("EMA decay {} must lie in (0, 1)", self.ema_decay));
        }
        if self.d_steps == 0 || self.d_ch == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("d_steps, d_ch, log_every and checkpoint_every must be positive".into());
        }
        if self.standing_batches == 0 {
            return bad("standing statistics need at least one batch".into());
        }
        if self.truncation.is_nan() || self.truncation < 0.0 {
            return bad(format!("truncation threshold {} must be ≥ 0", self.truncation));
        }
        let g = &self.generator;
        self.decomposition()?.validate(g.frames(), g.resolution(), g.resolution())
    }

    pub fn decomposition(&self) -> Result<DecompositionConfig> {
        let mut d = DecompositionConfig::preset(&self.decomposition)?;
        d.frames_from = self.frames_from;
        if let Some(k) = self.view_frames {
            d.k = k;
        }
        Ok(d)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Bias-corrected Adam over one parameter group.
#[derive(Clone, Debug)]
pub struct Adam<F: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken.
    pub t: u64,
    pub m: BTreeMap<ParamId, Tensor<F>>,
    pub v: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params<F>, grads: &[(ParamId, Tensor<F>)]) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = F::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (F::of(self.lr), F::of(self.eps));
        for (id, g) in grads {
            let shape = g.shape().to_vec();
            let m = self.m.entry(*id).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(*id).or_insert_with(|| Tensor::zeros(&shape));
            let mut p = params.get(*id).clone();
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(invalid(format!("gradient shape {:?} for {:?}", g.shape(), p.shape())));
            }
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (F::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (F::one() - b2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
            params.set(*id, p)?;
        }
        Ok(())
    }
}

/// Shadow copy of the generator's trainable parameters.
#[derive(Clone, Debug, Default)]
pub struct EmaState<F: Real> {
    pub shadow: Option<BTreeMap<ParamId, Tensor<F>>>,
}

impl<F: Real> EmaState<F> {
    pub fn new() -> Self {
        EmaState { shadow: None }
    }

    pub fn initialized(&self) -> bool {
        self.shadow.is_some()
    }

    /// Called after step `step` completes: no-op before `start`, a copy on the
    /// first call at or after it, `γ·shadow + (1 − γ)·params` afterwards.
    pub fn update(&mut self, params: &Params<F>, ids: &[ParamId], step: u64, decay: f64, start: u64) {
        if step < start {
            return;
        }
        match &mut self.shadow {
            None => {
                self.shadow = Some(ids.iter().map(|&id| (id, params.get(id).clone())).collect());
            }
            Some(shadow) => {
                let (g, h) = (F::of(decay), F::of(1.0 - decay));
                for (id, s) in shadow.iter_mut() {
                    let p = params.get(*id);
                    for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                        *a = g * *a + h * b;
                    }
                }
            }
        }
    }

    /// `params` with shadowed entries replaced, or a plain copy before
    /// initialization.
    pub fn apply(&self, params: &Params<F>) -> Result<Params<F>> {
        let mut out = params.clone();
        if let Some(shadow) = &self.shadow {
            for (id, t) in shadow {
                out.set(*id, t.clone())?;
            }
        }
        Ok(out)
    }
}

/// Per-coordinate truncated normal: every entry is redrawn until
/// `|z_i| ≤ threshold`. `∞` leaves `z` alone, `0` zeroes it.
pub fn apply_truncation<F: Real, R: Rng + ?Sized>(z: &mut Tensor<F>, threshold: f64, rng: &mut R) -> Result<()> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(invalid(format!("truncation threshold {threshold} must be ≥ 0")));
    }
    if threshold.is_infinite() {
        return Ok(());
    }
    if threshold == 0.0 {
        z.data_mut().iter_mut().for_each(|x| *x = F::zero());
        return Ok(());
    }
    let thr = F::of(threshold);
    for x in z.data_mut() {
        while x.abs() > thr {
            *x = F::of(rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(())
}

/// Standard normal latents `[b, dim]`, optionally truncated.
pub fn sample_latents<F: Real, R: Rng + ?Sized>(b: usize, dim: usize, truncation: Option<f64>, rng: &mut R) -> Result<Tensor<F>> {
    let mut z = Tensor::randn(&[b, dim], rng);
    if let Some(t) = truncation {
        apply_truncation(&mut z, t, rng)?;
    }
    Ok(z)
}

/// Generator, discriminator and the parameters they share a store with.
#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub params: Params<F>,
    pub gen: Generator,
    pub disc: Discriminator,
}

impl<F: Real> Model<F> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut params = Params::new();
        let g = &cfg.generator;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[streams::INIT, 0]));
        let gen = Generator::new(&mut Init::new(&mut params, &mut rng, "g", Group::Generator), g)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[streams::INIT, 1]));
        let disc = Discriminator::new(
            &mut Init::new(&mut params, &mut rng, "d", Group::Discriminator),
            &cfg.decomposition()?,
            cfg.d_ch,
            g.resolution(),
            g.frames(),
            g.t_cond,
        )?;
        Ok(Model { params, gen, disc })
    }

    /// Generated frames `[B, T_out, 3, H, W]` from `params` (live or EMA).
    pub fn generate(&self, params: &Params<F>, cond: &Tensor<F>, z: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let mut cx = Cx::new(params, mode, None);
        let c = cx.constant(cond.clone());
        let zv = cx.constant(z.clone());
        let out = self.gen.forward(&mut cx, zv, c)?;
        Ok(cx.value(out.video).clone())
    }
}

mod streams {
    pub const INIT: u64 = 0;
    pub const Z_D: u64 = 1;
    pub const VIEWS_D: u64 = 2;
    pub const Z_G: u64 = 3;
    pub const VIEWS_G: u64 = 4;
    pub const STANDING: u64 = 5;
}

/// Losses of one training step (the last discriminator update's `d_loss`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub adversarial: f64,
    pub penalty: f64,
}

fn scalar<F: Real>(t: &Tensor<F>) -> f64 {
    t.data()[0].to_f64().unwrap_or(f64::NAN)
}

fn grad_norm<F: Real>(grads: &[(ParamId, Tensor<F>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| {
            let v = x.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Training state: model, optimizers, EMA and the step counter.
#[derive(Clone, Debug)]
pub struct Trainer<F: Real> {
    pub cfg: TrainConfig,
    pub model: Model<F>,
    pub opt_g: Adam<F>,
    pub opt_d: Adam<F>,
    pub ema: EmaState<F>,
    /// Completed steps.
    pub step: u64,
}

impl<F: Real> Trainer<F> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg)?;
        Ok(Trainer {
            opt_g: Adam::new(cfg.lr_g, cfg.beta1, cfg.beta2, cfg.adam_eps),
            opt_d: Adam::new(cfg.lr_d, cfg.beta1, cfg.beta2, cfg.adam_eps),
            ema: EmaState::new(),
            step: 0,
            model,
            cfg,
        })
    }

    fn rng(&self, stream: u64, sub: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[stream, self.step, sub]))
    }

    /// Training batch of step `step`, `[B, T, 3, H, W]`.
    pub fn batch_for_step(&self, clips: &[VideoClip], step: u64) -> Result<Tensor<F>> {
        if clips.is_empty() {
            return Err(invalid("training needs at least one clip"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.data_seed, &[step]));
        let idx: Vec<usize> = (0..self.cfg.batch).map(|_| rng.gen_range(0..clips.len())).collect();
        let g = &self.cfg.generator;
        make_batch(clips, &idx, g.resolution(), g.frames(), &mut rng)
    }

    fn apply_group_updates(&mut self, updates: Vec<(ParamId, Tensor<F>)>, group: Group) -> Result<()> {
        let keep = updates
            .into_iter()
            .filter(|(id, _)| self.model.params.entry(*id).group == group)
            .collect();
        self.model.params.apply_updates(keep)
    }

    fn generator_weights(&self) -> Vec<ParamId> {
        self.model.params.of_kind(Group::Generator, Kind::Weight)
    }

    /// `d_steps` discriminator updates and one generator update on `batch`.
    pub fn train_step(&mut self, batch: &Tensor<F>) -> Result<StepLosses> {
        let g = self.cfg.generator.clone();
        let want = [self.cfg.batch, g.frames(), 3, g.resolution(), g.resolution()];
        if batch.shape() != want {
            return Err(invalid(format!("batch {:?}, expected {want:?}", batch.shape())));
        }
        let cond = batch.narrow(1, 0, g.t_cond)?;
        let b = self.cfg.batch;
        let head = self.cfg.head;
        let mut d_loss = 0.0;

        for k in 0..self.cfg.d_steps {
            let z: Tensor<F> = sample_latents(b, g.latent, None, &mut self.rng(streams::Z_D, k as u64))?;
            let mut views = self.rng(streams::VIEWS_D, k as u64);
            let params = &self.model.params;
            let mut cx = Cx::new(params, Mode::Train, Some(Group::Discriminator));
            let zv = cx.constant(z);
            let cv = cx.constant(cond.clone());
            let fake = self.model.gen.forward(&mut cx, zv, cv)?.video;
            let fake = cx.tape.concat(&[cv, fake], 1)?;
            let real = cx.constant(batch.clone());
            let sf = self.model.disc.forward(&mut cx, fake, &mut views)?;
            let sr = self.model.disc.forward(&mut cx, real, &mut views)?;
            let of = project_all(&mut cx.tape, &sf, head)?;
            let or = project_all(&mut cx.tape, &sr, head)?;
            let loss = hinge_d_loss(&mut cx.tape, &of, &or)?;
            d_loss = scalar(cx.value(loss));
            let grads = cx.gradients(loss)?;
            let d_norm = grad_norm(&grads);
            let updates = cx.take_updates();
            drop(cx);
            if !d_loss.is_finite() || !d_norm.is_finite() {
                return Err(self.non_finite("discriminator", d_loss, d_norm));
            }
            self.opt_d.step(&mut self.model.params, &grads)?;
            self.apply_group_updates(updates, Group::Discriminator)?;
        }

        let z: Tensor<F> = sample_latents(b, g.latent, None, &mut self.rng(streams::Z_G, 0))?;
        let mut views = self.rng(streams::VIEWS_G, 0);
        let weights = self.generator_weights();
        let params = &self.model.params;
        let mut cx = Cx::new(params, Mode::Train, Some(Group::Generator));
        let zv = cx.constant(z);
        let cv = cx.constant(cond);
        let fake = self.model.gen.forward(&mut cx, zv, cv)?.video;
        let fake = cx.tape.concat(&[cv, fake], 1)?;
        let sf = self.model.disc.forward(&mut cx, fake, &mut views)?;
        let of = project_all(&mut cx.tape, &sf, head)?;
        let wv: Vec<_> = weights.iter().map(|&id| cx.param(id)).collect();
        let pen = orthogonality_penalty(&mut cx.tape, &wv, F::of(self.cfg.ortho_beta))?;
        let gl = g_loss(&mut cx.tape, &of, Some(pen))?;
        let losses = StepLosses {
            step: self.step + 1,
            d_loss,
            g_loss: scalar(cx.value(gl.total)),
            adversarial: scalar(cx.value(gl.adversarial)),
            penalty: scalar(cx.value(pen)),
        };
        let grads = cx.gradients(gl.total)?;
        let g_norm = grad_norm(&grads);
        let updates = cx.take_updates();
        drop(cx);
        if !losses.g_loss.is_finite() || !g_norm.is_finite() {
            return Err(self.non_finite("generator", losses.g_loss, g_norm));
        }
        self.opt_g.step(&mut self.model.params, &grads)?;
        self.apply_group_updates(updates, Group::Generator)?;

        self.step += 1;
        let ids = self.model.params.trainable(Group::Generator);
        self.ema
            .update(&self.model.params, &ids, self.step, self.cfg.ema_decay, self.cfg.ema_start);
        Ok(losses)
    }

    fn non_finite(&self, which: &str, loss: f64, norm: f64) -> Error {
        let stats: Vec<String> = self
            .model
            .params
            .entries()
            .filter(|(_, e)| !e.value.all_finite())
            .map(|(_, e)| e.name.clone())
            .take(8)
            .collect();
        Error::NonFinite {
            step: self.step + 1,
            detail: format!(
                "{which} loss {loss}, gradient norm {norm}, non-finite parameters {stats:?}, adam steps G={} D={}",
                self.opt_g.t, self.opt_d.t
            ),
        }
    }

    /// EMA generator weights (live weights before the EMA starts) with
    /// standing statistics over `standing_batches` training batches.
    pub fn eval_params(&self, clips: &[VideoClip]) -> Result<Params<F>> {
        let mut params = self.ema.apply(&self.model.params)?;
        let g = &self.cfg.generator;
        let n = self.cfg.standing_batches;
        let gen = &self.model.gen;
        standing_statistics(&mut params, n, |p, i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[streams::STANDING, i as u64]));
            let idx: Vec<usize> = (0..self.cfg.batch).map(|_| rng.gen_range(0..clips.len())).collect();
            let batch: Tensor<F> = make_batch(clips, &idx, g.resolution(), g.frames(), &mut rng)?;
            let cond = batch.narrow(1, 0, g.t_cond)?;
            let z: Tensor<F> = sample_latents(self.cfg.batch, g.latent, None, &mut rng)?;
            let mut cx = Cx::new(p, Mode::Train, None);
            let zv = cx.constant(z);
            let cv = cx.constant(cond);
            gen.forward(&mut cx, zv, cv)?;
            Ok(cx.take_moments())
        })?;
        Ok(params)
    }

    // Checkpoints -----------------------------------------------------------

    fn tensor_records(&self) -> Vec<(String, &Tensor<F>)> {
        let p = &self.model.params;
        let name = |id: ParamId| p.entry(id).name.clone();
        let mut out: Vec<(String, &Tensor<F>)> = p.entries().map(|(_, e)| (format!("param/{}", e.name), &e.value)).collect();
        if let Some(shadow) = &self.ema.shadow {
            out.extend(shadow.iter().map(|(id, t)| (format!("ema/{}", name(*id)), t)));
        }
        for (tag, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            out.extend(opt.m.iter().map(|(id, t)| (format!("{tag}/m/{}", name(*id)), t)));
            out.extend(opt.v.iter().map(|(id, t)| (format!("{tag}/v/{}", name(*id)), t)));
        }
        out
    }

    /// Writes `manifest.json` and `tensors.bin` into `dir`, replacing it.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let meta = Manifest {
            step: self.step,
            adam_steps: [self.opt_g.t, self.opt_d.t],
            ema_initialized: self.ema.initialized(),
            rng: RngState {
                seed: self.cfg.seed,
                data_seed: self.cfg.data_seed,
                counter: self.step,
            },
            config: self.cfg.clone(),
        };
        write_bundle(dir, &meta, &self.tensor_records())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let (manifest, tensors): (Manifest, Vec<(String, Tensor<F>)>) = read_bundle(dir)?;
        let mut tr = Trainer::new(manifest.config.clone())?;
        tr.step = manifest.step;
        tr.opt_g.t = manifest.adam_steps[0];
        tr.opt_d.t = manifest.adam_steps[1];
        let mut shadow = BTreeMap::new();
        for (name, t) in tensors {
            let (tag, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("bad tensor name {name}")))?;
            let lookup = |n: &str| {
                tr.model
                    .params
                    .find(n)
                    .ok_or_else(|| Error::Format(format!("checkpoint names unknown parameter {n}")))
            };
            match tag {
                "param" => {
                    let id = lookup(rest)?;
                    tr.model.params.set(id, t)?;
                }
                "ema" => {
                    shadow.insert(lookup(rest)?, t);
                }
                "adam_g" | "adam_d" => {
                    let (which, n) = rest
                        .split_once('/')
                        .ok_or_else(|| Error::Format(format!("bad tensor name {name}")))?;
                    let id = lookup(n)?;
                    let opt = if tag == "adam_g" { &mut tr.opt_g } else { &mut tr.opt_d };
                    match which {
                        "m" => opt.m.insert(id, t),
                        "v" => opt.v.insert(id, t),
                        _ => return Err(Error::Format(format!("bad optimizer slot {name}"))),
                    };
                }
                _ => return Err(Error::Format(format!("unknown tensor group {name}"))),
            }
        }
        if manifest.ema_initialized {
            tr.ema.shadow = Some(shadow);
        }
        Ok(tr)
    }
}


#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    data_seed: u64,
    counter: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    step: u64,
    adam_steps: [u64; 2],
    ema_initialized: bool,
    rng: RngState,
    config: TrainConfig,
}

/// Train-set evaluation hook: returns an FVD-like score, lower is better.
pub type EvalHook<'a, F> = dyn FnMut(&Trainer<F>, &[VideoClip]) -> Result<f64> + 'a;

#[derive(Default)]
pub struct FitOptions<'a, F: Real> {
    /// Continue from `out/checkpoint` when it exists.
    pub resume: bool,
    /// Stop (and checkpoint) after this many completed steps.
    pub stop_at: Option<u64>,
    pub eval: Option<Box<EvalHook<'a, F>>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    pub steps: u64,
    pub steps_this_run: u64,
    pub last: Option<StepLosses>,
    pub best_eval: Option<(u64, f64)>,
    pub mean_step_secs: f64,
    pub checkpoint: PathBuf,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const BEST_DIR: &str = "best";
pub const LOG_FILE: &str = "log.jsonl";

/// Runs (or resumes) training, writing `checkpoint/`, `best/` and the JSON
/// lines log into `out`.
pub fn fit<F: Real>(cfg: &TrainConfig, clips: &[VideoClip], out: &Path, mut opts: FitOptions<'_, F>) -> Result<FitReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    let mut tr = if opts.resume && ckpt.join(MANIFEST).exists() {
        let tr = Trainer::<F>::load_checkpoint(&ckpt)?;
        if tr.cfg != *cfg {
            return Err(Error::Config("checkpoint was written with a different configuration".into()));
        }
        tr
    } else {
        Trainer::new(cfg.clone())?
    };
    let mut log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(opts.resume)
            .write(true)
            .truncate(!opts.resume)
            .open(out.join(LOG_FILE))?,
    );
    let end = opts.stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    let first = tr.step;
    let mut last = None;
    let mut best: Option<(u64, f64)> = None;
    let started = Instant::now();
    while tr.step < end {
        let batch = tr.batch_for_step(clips, tr.step)?;
        let losses = match tr.train_step(&batch) {
            Ok(l) => l,
            Err(e @ Error::NonFinite { .. }) => {
                fs::write(out.join("nonfinite.txt"), e.to_string())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        last = Some(losses);
        if tr.step % cfg.log_every == 0 {
            serde_json::to_writer(&mut log, &losses)?;
            writeln!(log)?;
            log.flush()?;
        }
        if cfg.eval_every > 0 && tr.step % cfg.eval_every == 0 {
            if let Some(hook) = opts.eval.as_mut() {
                let score = hook(&tr, clips)?;
                writeln!(log, "{}", serde_json::json!({"step": tr.step, "fvd": score}))?;
                log.flush()?;
                if best.map_or(true, |(_, b)| score < b) {
                    best = Some((tr.step, score));
                    tr.save_checkpoint(&out.join(BEST_DIR))?;
                }
            }
        }
        if tr.step % cfg.checkpoint_every == 0 && tr.step < end {
            tr.save_checkpoint(&ckpt)?;
        }
    }
    tr.save_checkpoint(&ckpt)?;
    let run = tr.step - first;
    Ok(FitReport {
        steps: tr.step,
        steps_this_run: run,
        last,
        best_eval: best,
        mean_step_secs: if run > 0 {
            started.elapsed().as_secs_f64() / run as f64
        } else {
            0.0
        },
        checkpoint: ckpt,
    })
}
