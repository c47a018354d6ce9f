//! Generator, conditioning-frame encoder, discriminator towers and the
//! discriminator decompositions.
//!
//! Videos are `[B, T, 3, H, W]`. Inside the generator, per-frame work runs on
//! a time-major `[T·B, C, H, W]` layout so batch norm can keep one set of
//! statistics per time step.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vidpred_tensor::{Real, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::layers::{BatchNorm, Conv, DBlock, GBlock, Linear};
use crate::params::{Cx, Init, ParamId};
use crate::rnn::{unit_rollout, Activation, RecurrentUnit, UnitConfig, UnitKind};

/// Image channels of every video.
pub const CHANNELS: usize = 3;
/// Spatial extent at which discriminator towers stop downsampling.
pub const TOWER_FLOOR: usize = 4;

fn default_k() -> usize {
    3
}
fn default_n_kernels() -> usize {
    9
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub latent: usize,
    /// Width of `z ⊕ class features`.
    pub cond_dim: usize,
    pub ch: usize,
    pub start_res: usize,
    pub stages: usize,
    pub t_cond: usize,
    pub t_out: usize,
    pub unit: UnitKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_n_kernels")]
    pub n_kernels: usize,
    #[serde(default)]
    pub activation: Option<Activation>,
    #[serde(default = "default_true")]
    pub kernel_softmax: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent: 32,
            cond_dim: 64,
            ch: 16,
            start_res: 4,
            stages: 2,
            t_cond: 2,
            t_out: 6,
            unit: UnitKind::TsruS,
            k: 3,
            n_kernels: 9,
            activation: None,
            kernel_softmax: true,
        }
    }
}

impl GeneratorConfig {
    pub fn resolution(&self) -> usize {
        self.start_res << self.stages
    }

    pub fn frames(&self) -> usize {
        self.t_cond + self.t_out
    }

    /// Recurrent-unit resolution of stage `i`.
    pub fn stage_res(&self, i: usize) -> usize {
        self.start_res << i
    }

    /// Channel width of stage `i`; `i == stages` is the width fed to the
    /// output layer.
    pub fn stage_channels(&self, i: usize) -> usize {
        if i >= self.stages {
            self.ch
        } else {
            self.ch << (self.stages - 1 - i)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent", self.latent),
            ("cond_dim", self.cond_dim),
            ("ch", self.ch),
            ("start_res", self.start_res),
            ("stages", self.stages),
            ("t_cond", self.t_cond),
            ("t_out", self.t_out),
            ("k", self.k),
            ("n_kernels", self.n_kernels),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("generator {name} must be at least 1")));
            }
        }
        if self.cond_dim < self.latent {
            return Err(Error::Config(format!(
                "conditioning vector ({}) cannot be narrower than the latent ({})",
                self.cond_dim, self.latent
            )));
        }
        if self.unit == UnitKind::ConvLstm && self.ch % 2 != 0 {
            return Err(Error::Config("ConvLSTM needs an even channel multiplier".into()));
        }
        Ok(())
    }

    fn unit_config(&self, i: usize) -> UnitConfig {
        let c = self.stage_channels(i);
        UnitConfig {
            kind: self.unit,
            hidden: c,
            input: c,
            k: self.k,
            n_kernels: self.n_kernels,
            activation: self.activation,
            kernel_softmax: self.kernel_softmax,
        }
    }
}

/// Encoder and spatial-discriminator channel width of block `j`.
fn tower_channels(ch: usize, j: usize) -> usize {
    ch << j.min(3)
}

/// Per-frame residual tower on the conditioning frames; its feature maps at
/// each generator resolution become the recurrent units' initial states.
#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<DBlock>,
    /// Indexed by generator stage.
    compress: Vec<Conv>,
    t_cond: usize,
    res: usize,
}

impl Encoder {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, cfg: &GeneratorConfig) -> Self {
        let mut s = init.scope(name);
        let blocks = (0..cfg.stages)
            .map(|j| {
                let cin = if j == 0 { CHANNELS } else { tower_channels(cfg.ch, j - 1) };
                DBlock::new(&mut s, &format!("block{j}"), cin, tower_channels(cfg.ch, j), 2, true, j > 0)
            })
            .collect();
        let compress = (0..cfg.stages)
            .map(|i| {
                let j = cfg.stages - 1 - i;
                Conv::new(
                    &mut s,
                    &format!("compress{i}"),
                    cfg.t_cond * tower_channels(cfg.ch, j),
                    cfg.stage_channels(i),
                    3,
                    2,
                    true,
                )
            })
            .collect();
        Encoder {
            blocks,
            compress,
            t_cond: cfg.t_cond,
            res: cfg.resolution(),
        }
    }

    /// Per-frame feature maps `[B·T_c, C_j, r_j, r_j]` after each block,
    /// finest first.
    pub fn features<F: Real>(&self, cx: &mut Cx<'_, F>, frames: Var) -> Result<Vec<Var>> {
        let s = cx.shape(frames);
        if s.len() != 5 || s[1] != self.t_cond || s[2] != CHANNELS || s[3] != self.res || s[4] != self.res {
            return Err(invalid(format!(
                "encoder expects [B, {}, {CHANNELS}, {r}, {r}], got {s:?}",
                self.t_cond,
                r = self.res
            )));
        }
        let mut x = cx.tape.reshape(frames, &[s[0] * self.t_cond, CHANNELS, self.res, self.res])?;
        let mut feats = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(cx, x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// `frames [B, T_c, 3, H, W]` → initial states `[B, C_i, r_i, r_i]`, one
    /// per generator stage.
    pub fn forward<F: Real>(&self, cx: &mut Cx<'_, F>, frames: Var) -> Result<Vec<Var>> {
        let feats = self.features(cx, frames)?;
        let b = cx.shape(frames)[0];
        let stages = self.blocks.len();
        let mut states = Vec::with_capacity(stages);
        for (i, conv) in self.compress.iter().enumerate() {
            let f = feats[stages - 1 - i];
            let fs = cx.shape(f);
            let folded = cx.tape.reshape(f, &[b, self.t_cond * fs[1], fs[2], fs[3]])?;
            let c = conv.forward(cx, folded)?;
            states.push(cx.tape.relu(c));
        }
        Ok(states)
    }
}

/// Generator output: the predicted frames and, per stage and time step, the
/// pixelwise kernels each warping unit applied.
#[derive(Clone, Debug)]
pub struct GenOut {
    pub video: Var,
    pub warps: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
struct Stage {
    unit: RecurrentUnit,
    conv: Conv,
    block_a: GBlock,
    block_b: GBlock,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    /// Class features of the dummy class, `[cond_dim − latent]`.
    class: Option<ParamId>,
    embed: Linear,
    pub encoder: Encoder,
    stages: Vec<Stage>,
    out_bn: BatchNorm,
    out_conv: Conv,
}

impl Generator {
    pub fn new<F: Real>(init: &mut Init<'_, F>, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let class_dim = cfg.cond_dim - cfg.latent;
        let class = (class_dim > 0).then(|| {
            let v = Tensor::randn(&[class_dim], init.rng());
            init.affine("class", v)
        });
        let (c0, r0) = (cfg.stage_channels(0), cfg.start_res);
        let embed = Linear::new(init, "embed", cfg.cond_dim, c0 * r0 * r0, true, false);
        let encoder = Encoder::new(init, "encoder", cfg);
        let mut stages = Vec::with_capacity(cfg.stages);
        for i in 0..cfg.stages {
            let mut s = init.scope(&format!("stage{i}"));
            let c = cfg.stage_channels(i);
            let unit = RecurrentUnit::new(&mut s, "unit", cfg.unit_config(i))?;
            let unit_out = if cfg.unit == UnitKind::ConvLstm { c / 2 } else { c };
            stages.push(Stage {
                unit,
                conv: Conv::new(&mut s, "conv", unit_out, c, 3, 2, true),
                block_a: GBlock::new(&mut s, "block_a", c, c, cfg.cond_dim, cfg.t_out, false),
                block_b: GBlock::new(&mut s, "block_b", c, cfg.stage_channels(i + 1), cfg.cond_dim, cfg.t_out, true),
            });
        }
        let c_last = cfg.stage_channels(cfg.stages);
        Ok(Generator {
            cfg: cfg.clone(),
            class,
            embed,
            encoder,
            stages,
            out_bn: BatchNorm::plain(init, "out_bn", c_last, cfg.t_out),
            out_conv: Conv::new(init, "out_conv", c_last, CHANNELS, 3, 2, true),
        })
    }

    /// Embedding weight, the one generator layer without spectral norm.
    pub fn embedding_weight(&self) -> ParamId {
        self.embed.w
    }

    /// `z [B, latent]`, `cond_frames [B, T_c, 3, H, W]` → `[B, T_out, 3, H, W]`.
    pub fn forward<F: Real>(&self, cx: &mut Cx<'_, F>, z: Var, cond_frames: Var) -> Result<GenOut> {
        let cfg = &self.cfg;
        let zs = cx.shape(z);
        if zs.len() != 2 || zs[1] != cfg.latent {
            return Err(invalid(format!("latent must be [B, {}], got {zs:?}", cfg.latent)));
        }
        let b = zs[0];
        let cs = cx.shape(cond_frames);
        if cs.first() != Some(&b) {
            return Err(invalid(format!("latent batch {b} and conditioning frames {cs:?} disagree")));
        }
        let y = match self.class {
            Some(id) => {
                let cls = cx.param(id);
                let d = cfg.cond_dim - cfg.latent;
                let cls = cx.tape.reshape(cls, &[1, d])?;
                let cls = cx.tape.expand(cls, &[b, d])?;
                cx.tape.concat(&[z, cls], 1)?
            }
            None => z,
        };
        let states = self.encoder.forward(cx, cond_frames)?;
        let (c0, r0) = (cfg.stage_channels(0), cfg.start_res);
        let e = self.embed.forward(cx, y)?;
        let e = cx.tape.reshape(e, &[b, c0, r0, r0])?;
        let mut inputs = vec![e; cfg.t_out];
        let mut warps = Vec::with_capacity(self.stages.len());
        let mut x = e;

        for (i, stage) in self.stages.iter().enumerate() {
            let outs = unit_rollout(cx, &stage.unit, states[i], &inputs)?;
            warps.push(outs.iter().filter_map(|o| o.warp).collect());
            let mut hs = Vec::with_capacity(outs.len());
            for o in &outs {
                hs.push(if cfg.unit == UnitKind::ConvLstm {
                    let c = cx.shape(o.h)[1];
                    cx.tape.narrow(o.h, 1, 0, c / 2)?
                } else {
                    o.h
                });
            }
            let stacked = cx.tape.stack(&hs)?;
            let s = cx.shape(stacked);
            let flat = cx.tape.reshape(stacked, &[cfg.t_out * b, s[2], s[3], s[4]])?;
            x = stage.conv.forward(cx, flat)?;
            x = stage.block_a.forward(cx, x, y)?;
            x = stage.block_b.forward(cx, x, y)?;
            if i + 1 < self.stages.len() {
                inputs = (0..cfg.t_out)
                    .map(|t| cx.tape.narrow(x, 0, t * b, b))
                    .collect::<std::result::Result<_, _>>()?;
            }
        }

        let h = self.out_bn.forward(cx, x, None)?;
        let h = cx.tape.relu(h);
        let h = self.out_conv.forward(cx, h)?;
        let h = cx.tape.tanh(h);
        let res = cfg.resolution();
        let h = cx.tape.reshape(h, &[cfg.t_out, b, CHANNELS, res, res])?;
        let video = cx.tape.permute(h, &[1, 0, 2, 3, 4])?;
        Ok(GenOut { video, warps })
    }
}

/// One sub-discriminator input type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewKind {
    /// `K` sampled full-resolution frames.
    #[serde(rename = "F")]
    Frames,
    /// The same frames downsampled by `s`.
    #[serde(rename = "dF")]
    DownsampledFrames,
    /// The full video.
    #[serde(rename = "clV")]
    Clip,
    /// The video downsampled by `s`.
    #[serde(rename = "dV")]
    DownsampledVideo,
    /// A full-length `H/s × W/s` spatial crop.
    #[serde(rename = "crV")]
    CroppedVideo,
}

impl ViewKind {
    pub const ALL: [ViewKind; 5] = [
        ViewKind::Frames,
        ViewKind::DownsampledFrames,
        ViewKind::Clip,
        ViewKind::DownsampledVideo,
        ViewKind::CroppedVideo,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ViewKind::Frames => "F",
            ViewKind::DownsampledFrames => "dF",
            ViewKind::Clip => "clV",
            ViewKind::DownsampledVideo => "dV",
            ViewKind::CroppedVideo => "crV",
        }
    }

    pub fn is_video(self) -> bool {
        matches!(self, ViewKind::Clip | ViewKind::DownsampledVideo | ViewKind::CroppedVideo)
    }

    pub fn is_reduced(self) -> bool {
        !matches!(self, ViewKind::Frames | ViewKind::Clip)
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which frames the per-frame views sample from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    /// Conditioning and generated frames together.
    #[default]
    Full,
    /// Generated frames only.
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionConfig {
    pub views: Vec<ViewKind>,
    pub k: usize,
    pub s: usize,
    #[serde(default)]
    pub frames_from: FrameSource,
}

/// Names accepted by [`DecompositionConfig::preset`].
pub const PRESETS: [&str; 9] = [
    "clip",
    "downsampled",
    "cropped",
    "cropped_downsampled",
    "mocogan_k1",
    "mocogan_k8",
    "dvdganfp",
    "faster",
    "stronger",
];

impl DecompositionConfig {
    pub fn new(views: &[ViewKind], k: usize, s: usize) -> Self {
        DecompositionConfig {
            views: views.to_vec(),
            k,
            s,
            frames_from: FrameSource::Full,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        use ViewKind::*;
        let (views, k): (&[ViewKind], usize) = match name {
            "clip" => (&[Clip], 8),
            "downsampled" => (&[DownsampledVideo], 8),
            "cropped" => (&[CroppedVideo], 8),
            "cropped_downsampled" => (&[DownsampledVideo, CroppedVideo], 8),
            "mocogan_k1" => (&[Frames, Clip], 1),
            "mocogan_k8" => (&[Frames, Clip], 8),
            "dvdganfp" => (&[Frames, DownsampledVideo], 8),
            "faster" => (&[DownsampledFrames, CroppedVideo], 8),
            "stronger" => (&[DownsampledFrames, DownsampledVideo, CroppedVideo], 8),
            other => {
                return Err(Error::Config(format!(
                    "unknown decomposition {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self::new(views, k, 2))
    }

    pub fn has_frame_views(&self) -> bool {
        self.views.iter().any(|v| !v.is_video())
    }

    /// Checks the configuration against a `t`-frame `h × w` video.
    pub fn validate(&self, t: usize, h: usize, w: usize) -> Result<()> {
        if self.views.is_empty() || !self.views.iter().any(|v| v.is_video()) {
            return Err(Error::Config("a decomposition needs at least one video-level view".into()));
        }
        let mut seen = self.views.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.views.len() {
            return Err(Error::Config(format!("duplicate views in {:?}", self.views)));
        }
        if self.s == 0 || h % self.s != 0 || w % self.s != 0 {
            return Err(Error::Config(format!("downsample factor {} must divide {h}x{w}", self.s)));
        }
        if self.has_frame_views() {
            if self.k == 0 {
                return Err(Error::Config("frame views need K ≥ 1".into()));
            }
            if self.k > t {
                return Err(Error::Config(format!("cannot sample K={} frames from {t}", self.k)));
            }
        }
        Ok(())
    }

    /// Input resolution seen by the tower of `view` for an `h`-pixel video.
    pub fn view_res(&self, view: ViewKind, h: usize) -> usize {
        if view.is_reduced() {
            h / self.s
        } else {
            h
        }
    }
}

impl FromStr for DecompositionConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DecompositionConfig::preset(s)
    }
}

/// Pixels per video processed by the active views.
pub fn pixel_count(views: &[ViewKind], k: u64, t: u64, h: u64, w: u64, s: u64) -> u64 {
    let small = (h / s) * (w / s);
    views
        .iter()
        .map(|v| match v {
            ViewKind::Frames => k * h * w,
            ViewKind::DownsampledFrames => k * small,
            ViewKind::Clip => t * h * w,
            ViewKind::DownsampledVideo | ViewKind::CroppedVideo => t * small,
        })
        .sum()
}

/// Random choices behind one set of views.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ViewSample {
    /// Sorted frame indices into the full video.
    pub frames: Vec<usize>,
    /// Top-left `(row, col)` of the crop.
    pub crop: Option<(usize, usize)>,
}

/// A discriminator input. Frame views are `[B·K, 3, h, w]` (sample-major);
/// video views are `[B, 3, T, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub kind: ViewKind,
    pub input: Var,
}

/// Draws the random frame indices and crop offset for one batch.
pub fn sample_views<R: Rng + ?Sized>(
    cfg: &DecompositionConfig,
    t: usize,
    t_cond: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<ViewSample> {
    cfg.validate(t, h, w)?;
    let mut sample = ViewSample::default();
    if cfg.has_frame_views() {
        let start = match cfg.frames_from {
            FrameSource::Full => 0,
            FrameSource::Generated => t_cond,
        };
        let pool = t.saturating_sub(start);
        if cfg.k > pool {
            return Err(invalid(format!("cannot sample K={} frames from {pool}", cfg.k)));
        }
        let mut idx: Vec<usize> = rand::seq::index::sample(rng, pool, cfg.k)
            .into_iter()
            .map(|i| i + start)
            .collect();
        idx.sort_unstable();
        sample.frames = idx;
    }
    if cfg.views.contains(&ViewKind::CroppedVideo) {
        let (ch, cw) = (h / cfg.s, w / cfg.s);
        sample.crop = Some((rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw)));
    }
    Ok(sample)
}

/// Builds the discriminator inputs for `video [B, T, 3, H, W]`.
pub fn make_discriminator_views<F: Real, R: Rng + ?Sized>(
    cx: &mut Cx<'_, F>,
    video: Var,
    cfg: &DecompositionConfig,
    t_cond: usize,
    rng: &mut R,
) -> Result<(Vec<View>, ViewSample)> {
    let vs = cx.shape(video);
    if vs.len() != 5 || vs[2] != CHANNELS {
        return Err(invalid(format!("video must be [B, T, {CHANNELS}, H, W], got {vs:?}")));
    }
    let (b, t, h, w) = (vs[0], vs[1], vs[3], vs[4]);
    let sample = sample_views(cfg, t, t_cond, h, w, rng)?;
    let tape = &mut cx.tape;
    let mut views = Vec::with_capacity(cfg.views.len());
    for &kind in &cfg.views {
        let input = match kind {
            ViewKind::Frames | ViewKind::DownsampledFrames => {
                let f = tape.index_select(video, 1, &sample.frames)?;
                let f = if kind == ViewKind::DownsampledFrames {
                    tape.avg_pool2d(f, cfg.s)?
                } else {
                    f
                };
                let fs = tape.shape(f).to_vec();
                tape.reshape(f, &[b * cfg.k, CHANNELS, fs[3], fs[4]])?
            }
            ViewKind::Clip | ViewKind::DownsampledVideo | ViewKind::CroppedVideo => {
                let v = match kind {
                    ViewKind::Clip => video,
                    ViewKind::DownsampledVideo => tape.avg_pool2d(video, cfg.s)?,
                    _ => {
                        let (y0, x0) = sample.crop.expect("crop drawn for crV");
                        let v = tape.narrow(video, 3, y0, h / cfg.s)?;
                        tape.narrow(v, 4, x0, w / cfg.s)?
                    }
                };
                tape.permute(v, &[0, 2, 1, 3, 4])?
            }
        };
        views.push(View { kind, input });
    }
    Ok((views, sample))
}

/// Residual discriminator tower with a projection head. Video towers use 3-D
/// convolutions in their first two blocks.
#[derive(Clone, Debug)]
pub struct Tower {
    blocks: Vec<DBlock>,
    head: Linear,
    /// Projection embedding of the dummy class, `[C, 1]`.
    pub embed: ParamId,
    pub video: bool,
    pub res: usize,
}

/// Per-(sample, time) scores of one sub-discriminator, each `[B, T′]`.
#[derive(Clone, Copy, Debug)]
pub struct Scores {
    pub kind: ViewKind,
    pub r_x: Var,
    pub r_xy: Var,
}

impl Tower {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, ch: usize, res: usize, video: bool) -> Result<Self> {
        if res < TOWER_FLOOR || res % TOWER_FLOOR != 0 || !(res / TOWER_FLOOR).is_power_of_two() {
            return Err(invalid(format!(
                "tower input resolution {res} must be {TOWER_FLOOR}·2^n"
            )));
        }
        let n_down = (res / TOWER_FLOOR).trailing_zeros() as usize;
        let mut s = init.scope(name);
        let blocks: Vec<DBlock> = (0..=n_down)
            .map(|j| {
                let cin = if j == 0 { CHANNELS } else { tower_channels(ch, j - 1) };
                let dims = if video && j < 2 { 3 } else { 2 };
                DBlock::new(&mut s, &format!("block{j}"), cin, tower_channels(ch, j), dims, j < n_down, j > 0)
            })
            .collect();
        let c = tower_channels(ch, n_down);
        let head = Linear::new(&mut s, "head", c, 1, true, true);
        let e = Tensor::randn(&[c, 1], s.rng()).scale(F::of(1.0 / (c as f64).sqrt()));
        let embed = s.affine("embed", e);
        Ok(Tower {
            blocks,
            head,
            embed,
            video,
            res,
        })
    }

    /// Frame towers take `[N, 3, h, w]` and return `[N]`-long scores;
    /// video towers take `[B, 3, T, h, w]` and return `[B·T]`, sample-major.
    pub fn forward<F: Real>(&self, cx: &mut Cx<'_, F>, x: Var) -> Result<(Var, Var)> {
        let s = cx.shape(x);
        let want = if self.video { 5 } else { 4 };
        if s.len() != want || s[1] != CHANNELS || s[want - 2] != self.res || s[want - 1] != self.res {
            return Err(invalid(format!(
                "{} tower built for {r}x{r} inputs got {s:?}",
                if self.video { "video" } else { "frame" },
                r = self.res
            )));
        }
        let mut h = x;
        let mut is_3d = self.video;
        let t = if self.video { s[2] } else { 1 };
        for block in &self.blocks {
            if is_3d && block.dims() == 2 {
                h = fold_time(cx, h)?;
                is_3d = false;
            }
            h = block.forward(cx, h)?;
        }
        if is_3d {
            h = fold_time(cx, h)?;
        }
        h = cx.tape.relu(h);
        let hs = cx.shape(h);
        let n = hs[0];
        debug_assert_eq!(n, s[0] * t);
        let flat = cx.tape.reshape(h, &[n, hs[1], hs[2] * hs[3]])?;
        let feat = cx.tape.sum_axis(flat, 2)?;
        let r_x = self.head.forward(cx, feat)?;
        let r_x = cx.tape.reshape(r_x, &[n])?;
        let e = cx.param(self.embed);
        let r_xy = cx.tape.matmul(feat, e)?;
        let r_xy = cx.tape.reshape(r_xy, &[n])?;
        Ok((r_x, r_xy))
    }
}

/// `[B, C, T, h, w]` → `[B·T, C, h, w]`.
fn fold_time<F: Real>(cx: &mut Cx<'_, F>, x: Var) -> Result<Var> {
    let s = cx.shape(x);
    let p = cx.tape.permute(x, &[0, 2, 1, 3, 4])?;
    Ok(cx.tape.reshape(p, &[s[0] * s[2], s[1], s[3], s[4]])?)
}

/// The set of sub-discriminators of one decomposition.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DecompositionConfig,
    towers: Vec<(ViewKind, Tower)>,
    t_cond: usize,
}

impl Discriminator {
    /// Towers for `res × res` videos of `frames` frames.
    pub fn new<F: Real>(
        init: &mut Init<'_, F>,
        cfg: &DecompositionConfig,
        ch: usize,
        res: usize,
        frames: usize,
        t_cond: usize,
    ) -> Result<Self> {
        cfg.validate(frames, res, res)?;
        let mut towers = Vec::with_capacity(cfg.views.len());
        for &kind in &cfg.views {
            let tower = Tower::new(init, kind.label(), ch, cfg.view_res(kind, res), kind.is_video())?;
            towers.push((kind, tower));
        }
        Ok(Discriminator {
            cfg: cfg.clone(),
            towers,
            t_cond,
        })
    }

    pub fn tower(&self, kind: ViewKind) -> Option<&Tower> {
        self.towers.iter().find(|(k, _)| *k == kind).map(|(_, t)| t)
    }

    pub fn towers(&self) -> impl Iterator<Item = (ViewKind, &Tower)> {
        self.towers.iter().map(|(k, t)| (*k, t))
    }

    /// Scores every tower on its precomputed view.
    pub fn score_views<F: Real>(&self, cx: &mut Cx<'_, F>, views: &[View]) -> Result<Vec<Scores>> {
        let mut out = Vec::with_capacity(views.len());
        for view in views {
            let tower = self
                .tower(view.kind)
                .ok_or_else(|| invalid(format!("no tower for view {}", view.kind)))?;
            let s = cx.shape(view.input);
            let (b, t) = if tower.video { (s[0], s[2]) } else { (s[0] / self.cfg.k, self.cfg.k) };
            let (r_x, r_xy) = tower.forward(cx, view.input)?;
            out.push(Scores {
                kind: view.kind,
                r_x: cx.tape.reshape(r_x, &[b, t])?,
                r_xy: cx.tape.reshape(r_xy, &[b, t])?,
            });
        }
        Ok(out)
    }

    /// Samples views of `video [B, T, 3, H, W]` and scores them.
    pub fn forward<F: Real, R: Rng + ?Sized>(&self, cx: &mut Cx<'_, F>, video: Var, rng: &mut R) -> Result<Vec<Scores>> {
        let (views, _) = make_discriminator_views(cx, video, &self.cfg, self.t_cond, rng)?;
        self.score_views(cx, &views)
    }
}

/// Runs every active sub-discriminator of `disc` on `video`.
pub fn decomposition_outputs<F: Real, R: Rng + ?Sized>(
    cx: &mut Cx<'_, F>,
    disc: &Discriminator,
    video: Var,
    rng: &mut R,
) -> Result<Vec<Scores>> {
    disc.forward(cx, video, rng)
}
