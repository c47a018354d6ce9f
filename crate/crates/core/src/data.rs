//! Synthetic moving-shape videos, preprocessing and the `TVID` container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{imageops, imageops::FilterType, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidpred_tensor::{Real, Tensor};

use crate::error::{invalid, Error, Result};
use crate::params::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
    Static,
}

impl Direction {
    pub const ALL: [Direction; 5] = [
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
        Direction::Static,
    ];

    /// Unit step `(dx, dy)`, image rows growing downwards.
    pub fn unit(self) -> (i64, i64) {
        match self {
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Static => (0, 0),
        }
    }
}

fn default_shapes() -> Vec<ShapeKind> {
    vec![ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub resolution: usize,
    pub frames: usize,
    #[serde(default = "default_shapes")]
    pub shapes: Vec<ShapeKind>,
    /// Speeds are whole pixels per frame in `[min_speed, max_speed]`.
    pub min_speed: u32,
    pub max_speed: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            resolution: 32,
            frames: 16,
            shapes: default_shapes(),
            min_speed: 1,
            max_speed: 2,
        }
    }
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        Direction::ALL.len() * self.shapes.len()
    }

    /// `(direction, shape)` of class `label`.
    pub fn class(&self, label: usize) -> (Direction, ShapeKind) {
        let n = self.shapes.len();
        (Direction::ALL[label / n], self.shapes[label % n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || self.frames == 0 || self.shapes.is_empty() {
            return Err(Error::Config(format!(
                "synthetic spec needs resolution ≥ 8, frames ≥ 1 and a shape, got {self:?}"
            )));
        }
        if self.min_speed == 0 || self.min_speed > self.max_speed {
            return Err(Error::Config(format!(
                "speed range [{}, {}] must be positive and ordered",
                self.min_speed, self.max_speed
            )));
        }
        if self.resolution > u16::MAX as usize || self.frames > u16::MAX as usize {
            return Err(Error::Config("clip dimensions must fit in 16 bits".into()));
        }
        Ok(())
    }
}

/// One clip of `u8` RGB frames laid out `[T, H, W, 3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoClip {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub label: u16,
    pub seed: u64,
    pub frames: Vec<u8>,
}

impl VideoClip {
    pub fn new(t: usize, h: usize, w: usize, label: u16, seed: u64, frames: Vec<u8>) -> Result<Self> {
        if frames.len() != t * h * w * 3 {
            return Err(invalid(format!("{} bytes for a {t}x{h}x{w} clip", frames.len())));
        }
        Ok(VideoClip {
            t,
            h,
            w,
            label,
            seed,
            frames,
        })
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.h * self.w * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, i: usize, j: usize) -> [u8; 3] {
        let o = ((t * self.h + i) * self.w + j) * 3;
        [self.frames[o], self.frames[o + 1], self.frames[o + 2]]
    }
}

/// Sprite state; centre and velocity are whole pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sprite {
    pub kind: ShapeKind,
    pub radius: i64,
    pub x: i64,
    pub y: i64,
    pub vx: i64,
    pub vy: i64,
    pub color: [u8; 3],
}

impl Sprite {
    /// Whether the pixel with top-left corner `(i, j)` is covered; tested at
    /// the pixel centre.
    pub fn covers(&self, i: usize, j: usize) -> bool {
        let dx = 2 * j as i64 + 1 - 2 * self.x;
        let dy = 2 * i as i64 + 1 - 2 * self.y;
        let r2 = 2 * self.radius;
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= r2 * r2,
            ShapeKind::Square => dx.abs() < r2 && dy.abs() < r2,
            ShapeKind::Triangle => dy.abs() < r2 && 2 * dx.abs() <= dy + r2,
        }
    }

    /// One step with elastic reflection keeping the sprite inside `[0, size]`.
    pub fn advance(&mut self, size: i64) {
        let (lo, hi) = (self.radius, size - self.radius);
        self.x += self.vx;
        if self.x < lo {
            self.x = 2 * lo - self.x;
            self.vx = -self.vx;
        } else if self.x > hi {
            self.x = 2 * hi - self.x;
            self.vx = -self.vx;
        }
        self.y += self.vy;
        if self.y < lo {
            self.y = 2 * lo - self.y;
            self.vy = -self.vy;
        } else if self.y > hi {
            self.y = 2 * hi - self.y;
            self.vy = -self.vy;
        }
    }
}

/// Static two-colour linear gradient.
#[derive(Clone, Copy, Debug)]
pub struct Background {
    pub from: [u8; 3],
    pub to: [u8; 3],
    /// Gradient direction weights on rows and columns, each in `0..=4`.
    pub wy: u32,
    pub wx: u32,
}

impl Background {
    pub fn at(&self, i: usize, j: usize, size: usize) -> [u8; 3] {
        let denom = ((self.wy + self.wx).max(1) as usize) * (size - 1).max(1);
        let num = self.wy as usize * i + self.wx as usize * j;
        let mut out = [0u8; 3];
        for c in 0..3 {
            let (a, b) = (self.from[c] as usize, self.to[c] as usize);
            out[c] = ((a * (denom - num) + b * num + denom / 2) / denom) as u8;
        }
        out
    }
}

/// Renders `sprite` over `bg` for `t` frames starting from its current state.
pub fn render(sprite: Sprite, bg: &Background, size: usize, t: usize) -> Vec<u8> {
    let mut s = sprite;
    let mut out = Vec::with_capacity(t * size * size * 3);
    for step in 0..t {
        if step > 0 {
            s.advance(size as i64);
        }
        for i in 0..size {
            for j in 0..size {
                let px = if s.covers(i, j) { s.color } else { bg.at(i, j, size) };
                out.extend_from_slice(&px);
            }
        }
    }
    out
}

/// Draws the sprite and background of a clip of class `label`.
pub fn sample_scene<R: Rng + ?Sized>(spec: &SynthSpec, label: usize, rng: &mut R) -> (Sprite, Background) {
    let (dir, kind) = spec.class(label);
    let size = spec.resolution as i64;
    let radius = rng.gen_range((size / 8).max(2)..=(size / 5).max(2));
    let x = rng.gen_range(radius..=size - radius);
    let y = rng.gen_range(radius..=size - radius);
    let speed = rng.gen_range(spec.min_speed..=spec.max_speed) as i64;
    let (ux, uy) = dir.unit();
    let bg = Background {
        from: [rng.gen_range(0..96), rng.gen_range(0..96), rng.gen_range(0..96)],
        to: [rng.gen_range(0..96), rng.gen_range(0..96), rng.gen_range(0..96)],
        wy: rng.gen_range(0..=4),
        wx: rng.gen_range(0..=4),
    };
    let color = [rng.gen_range(160..=255), rng.gen_range(160..=255), rng.gen_range(160..=255)];
    let sprite = Sprite {
        kind,
        radius,
        x,
        y,
        vx: ux * speed,
        vy: uy * speed,
        color,
    };
    (sprite, bg)
}

/// `n` clips, class `i mod classes` for clip `i`; clip `i` depends only on
/// `(spec, seed, i)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64, n: usize) -> Result<Vec<VideoClip>> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("at least one clip must be generated"));
    }
    let classes = spec.num_classes();
    (0..n)
        .map(|i| {
            let clip_seed = derive_seed(seed, &[i as u64]);
            let label = i % classes;
            let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
            let (sprite, bg) = sample_scene(spec, label, &mut rng);
            let frames = render(sprite, &bg, spec.resolution, spec.frames);
            VideoClip::new(spec.frames, spec.resolution, spec.resolution, label as u16, clip_seed, frames)
        })
        .collect()
}

/// `x ↦ x / 127.5 − 1`.
pub fn to_unit_range<F: Real>(x: u8) -> F {
    F::of(x as f64 / 127.5 - 1.0)
}

/// Inverse of [`to_unit_range`], rounded and clamped.
pub fn from_unit_range<F: Real>(x: F) -> u8 {
    let v = x.to_f64().unwrap_or(0.0);
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Resizes so the smaller side equals `res` (bilinear), takes a random
/// `res × res` crop and a random window of `frames` frames, and maps pixels
/// to `[−1, 1]`. Output `[frames, 3, res, res]`.
pub fn preprocess<F: Real, R: Rng + ?Sized>(clip: &VideoClip, res: usize, frames: usize, rng: &mut R) -> Result<Tensor<F>> {
    if frames == 0 || frames > clip.t || res == 0 {
        return Err(invalid(format!(
            "cannot take {frames} frames at {res}px from a {}x{}x{} clip",
            clip.t, clip.h, clip.w
        )));
    }
    let short = clip.h.min(clip.w);
    let (nh, nw) = (
        (clip.h * res + short / 2) / short,
        (clip.w * res + short / 2) / short,
    );
    let start = rng.gen_range(0..=clip.t - frames);
    let oy = rng.gen_range(0..=nh - res);
    let ox = rng.gen_range(0..=nw - res);
    let mut out = Tensor::zeros(&[frames, 3, res, res]);
    let d = out.data_mut();
    for k in 0..frames {
        let raw = clip.frame(start + k);
        let resized;
        let (src, sw): (&[u8], usize) = if (nh, nw) == (clip.h, clip.w) {
            (raw, clip.w)
        } else {
            let img = RgbImage::from_raw(clip.w as u32, clip.h as u32, raw.to_vec())
                .ok_or_else(|| invalid("frame buffer size"))?;
            resized = imageops::resize(&img, nw as u32, nh as u32, FilterType::Triangle).into_raw();
            (&resized, nw)
        };
        for c in 0..3 {
            for i in 0..res {
                for j in 0..res {
                    let v = src[((oy + i) * sw + ox + j) * 3 + c];
                    d[((k * 3 + c) * res + i) * res + j] = to_unit_range(v);
                }
            }
        }
    }
    Ok(out)
}

/// Preprocessed batch `[B, frames, 3, res, res]` of the clips at `indices`.
pub fn make_batch<F: Real, R: Rng + ?Sized>(
    clips: &[VideoClip],
    indices: &[usize],
    res: usize,
    frames: usize,
    rng: &mut R,
) -> Result<Tensor<F>> {
    let parts = indices
        .iter()
        .map(|&i| {
            let clip = clips.get(i).ok_or_else(|| invalid(format!("clip {i} out of range")))?;
            let v = preprocess::<F, R>(clip, res, frames, rng)?;
            Ok(v.into_reshaped(&[1, frames, 3, res, res])?)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<F>> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

/// Splits `[B, T, ...]` after the first `t_c` frames.
pub fn split_condition_target<F: Real>(video: &Tensor<F>, t_c: usize) -> Result<(Tensor<F>, Tensor<F>)> {
    let t = *video.shape().get(1).ok_or_else(|| invalid("video has no time axis"))?;
    if t_c == 0 || t_c >= t {
        return Err(invalid(format!("cannot condition on {t_c} of {t} frames")));
    }
    Ok((video.narrow(1, 0, t_c)?, video.narrow(1, t_c, t - t_c)?))
}

const MAGIC: &[u8; 4] = b"TVID";
const VERSION: u32 = 1;

pub fn write_dataset<W: Write>(w: &mut W, clips: &[VideoClip]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(clips.len() as u64).to_le_bytes())?;
    for c in clips {
        if c.t > u16::MAX as usize || c.h > u16::MAX as usize || c.w > u16::MAX as usize {
            return Err(Error::Format(format!("clip {}x{}x{} exceeds 16-bit dimensions", c.t, c.h, c.w)));
        }
        w.write_all(&c.label.to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        for d in [c.t, c.h, c.w] {
            w.write_all(&(d as u16).to_le_bytes())?;
        }
        w.write_all(&c.frames)?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated dataset: {e}")))?;
    Ok(b)
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Vec<VideoClip>> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected TVID")));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = u64::from_le_bytes(read_array(r)?);
    let mut clips = Vec::with_capacity(n.min(1 << 16) as usize);
    for _ in 0..n {
        let label = u16::from_le_bytes(read_array(r)?);
        let seed = u64::from_le_bytes(read_array(r)?);
        let t = u16::from_le_bytes(read_array(r)?) as usize;
        let h = u16::from_le_bytes(read_array(r)?) as usize;
        let w = u16::from_le_bytes(read_array(r)?) as usize;
        let mut frames = vec![0u8; t * h * w * 3];
        r.read_exact(&mut frames)
            .map_err(|e| Error::Format(format!("truncated clip data: {e}")))?;
        clips.push(VideoClip::new(t, h, w, label, seed, frames)?);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after the last clip".into()));
    }
    Ok(clips)
}

pub fn save_dataset(path: &Path, clips: &[VideoClip]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, clips)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<VideoClip>> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}
