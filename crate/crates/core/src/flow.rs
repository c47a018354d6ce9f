//! Motion fields read off predicted warp kernels.
//!
//! A kernel row at `(i, j)` is a distribution over source offsets
//! `(m − r, n − r)`; its mean is the backward flow, the offset from which
//! [`crate::warp::warp_apply`] gathers.

use std::path::Path;

use image::{Rgb, RgbImage};
use vidpred_tensor::{Real, Tensor};

use crate::error::{invalid, Result};
use crate::warp::kernel_size;

/// Largest tolerated deviation of a kernel row sum from one.
pub const ROW_TOL: f64 = 1e-4;

/// Magnitude percentile that maps to full saturation when rendering.
pub const RENDER_PERCENTILE: f64 = 0.99;

/// `(dy, dx)` per pixel, `[H, W, 2]`, in pixels of this resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub vectors: Tensor<f64>,
}

impl FlowField {
    pub fn new(vectors: Tensor<f64>) -> Result<Self> {
        if vectors.rank() != 3 || vectors.shape()[2] != 2 {
            return Err(invalid(format!("flow field must be [H, W, 2], got {:?}", vectors.shape())));
        }
        if !vectors.all_finite() {
            return Err(invalid("flow field is not finite"));
        }
        Ok(FlowField { vectors })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            vectors: Tensor::zeros(&[h, w, 2]),
        }
    }

    pub fn constant(h: usize, w: usize, dy: f64, dx: f64) -> Self {
        FlowField {
            vectors: Tensor::from_fn(&[h, w, 2], |i| if i % 2 == 0 { dy } else { dx }),
        }
    }

    pub fn height(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let d = self.vectors.data();
        let p = (i * self.width() + j) * 2;
        (d[p], d[p + 1])
    }
}

/// Expected source offset of every kernel row of `w` `[H, W, k²]`.
pub fn kernels_to_flow<F: Real>(w: &Tensor<F>) -> Result<FlowField> {
    let &[h, wd, k2] = w.shape() else {
        return Err(invalid(format!("kernels must be [H, W, k²], got {:?}", w.shape())));
    };
    let k = kernel_size(k2)?;
    let r = (k as f64 - 1.0) / 2.0;
    let mut out = Tensor::zeros(&[h, wd, 2]);
    let od = out.data_mut();
    for (p, row) in w.data().chunks(k2).enumerate() {
        let mut sum = 0.0;
        let (mut dy, mut dx) = (0.0, 0.0);
        for (q, v) in row.iter().enumerate() {
            let v = v.to_f64().unwrap_or(f64::NAN);
            sum += v;
            dy += v * ((q / k) as f64 - r);
            dx += v * ((q % k) as f64 - r);
        }
        if !((sum - 1.0).abs() <= ROW_TOL) {
            return Err(invalid(format!(
                "kernel row at ({}, {}) sums to {sum}, not 1",
                p / wd,
                p % wd
            )));
        }
        od[2 * p] = dy;
        od[2 * p + 1] = dx;
    }
    FlowField::new(out)
}

/// [`kernels_to_flow`] for each item of a `[B, H, W, k²]` batch.
pub fn kernels_to_flow_batch<F: Real>(w: &Tensor<F>) -> Result<Vec<FlowField>> {
    if w.rank() != 4 {
        return Err(invalid(format!("kernels must be [B, H, W, k²], got {:?}", w.shape())));
    }
    let b = w.shape()[0];
    (0..b)
        .map(|i| {
            let item = w.narrow(0, i, 1)?;
            kernels_to_flow(&item.reshape(&w.shape()[1..])?)
        })
        .collect()
}

/// Folds coarse-to-fine `fields` into one field at the finest resolution:
/// `field ← upsample_nearest(field, f) · f + next`, with `f` the resolution
/// ratio between consecutive levels.
pub fn multiscale_combine(fields: &[FlowField]) -> Result<FlowField> {
    let (first, rest) = fields.split_first().ok_or_else(|| invalid("no flow fields to combine"))?;
    let mut acc = first.clone();
    for next in rest {
        let (h, w) = (acc.height(), acc.width());
        let (nh, nw) = (next.height(), next.width());
        if h == 0 || nh % h != 0 || nw % w.max(1) != 0 || nh / h != nw / w {
            return Err(invalid(format!("{h}x{w} does not upsample evenly to {nh}x{nw}")));
        }
        let f = nh / h;
        let mut up = next.vectors.clone();
        let d = up.data_mut();
        for i in 0..nh {
            for j in 0..nw {
                let (dy, dx) = acc.at(i / f, j / f);
                let p = (i * nw + j) * 2;
                d[p] += dy * f as f64;
                d[p + 1] += dx * f as f64;
            }
        }
        acc = FlowField::new(up)?;
    }
    Ok(acc)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Hue in degrees of the direction `(dy, dx)`, measured from +x towards +y.
pub fn flow_hue(dy: f64, dx: f64) -> f64 {
    dy.atan2(dx).to_degrees().rem_euclid(360.0)
}

/// Colour wheel rendering: hue encodes direction, saturation the magnitude
/// relative to the 99th percentile. Zero flow is white.
pub fn flow_to_image(field: &FlowField) -> RgbImage {
    let (h, w) = (field.height(), field.width());
    let mut mags: Vec<f64> = field.vectors.data().chunks(2).map(|v| v[0].hypot(v[1])).collect();
    mags.sort_by(f64::total_cmp);
    let scale = if mags.is_empty() {
        0.0
    } else {
        let rank = ((RENDER_PERCENTILE * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
        mags[rank - 1]
    };
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (dy, dx) = field.at(y as usize, x as usize);
        let mag = dy.hypot(dx);
        if scale <= 0.0 || mag == 0.0 {
            return Rgb([255, 255, 255]);
        }
        Rgb(hsv_to_rgb(flow_hue(dy, dx), (mag / scale).min(1.0), 1.0))
    })
}

pub fn save_flow_png(field: &FlowField, path: &Path) -> Result<()> {
    flow_to_image(field).save(path)?;
    Ok(())
}
