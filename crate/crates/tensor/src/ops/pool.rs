//! Spatial resampling over the last two axes; leading axes are batch-like.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{numel, Tensor};

fn plane_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return Err(shape_err!("spatial op needs rank >= 2, got {shape:?}"));
    }
    Ok((numel(&shape[..r - 2]), shape[r - 2], shape[r - 1]))
}

fn with_plane(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = h;
    s[r - 1] = w;
    s
}

struct AvgPool {
    k: usize,
}

impl<F: Real> Backward<F> for AvgPool {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (planes, h, w) = plane_dims(inputs[0].shape())?;
        let k = self.k;
        let (oh, ow) = (h / k, w / k);
        let scale = F::one() / F::of((k * k) as f64);
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    d[(p * h + y) * w + x] = g.data()[(p * oh + y / k) * ow + x / k] * scale;
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

struct AdaptiveMax {
    argmax: Vec<usize>,
}

impl<F: Real> Backward<F> for AdaptiveMax {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&src, &gv) in self.argmax.iter().zip(g.data()) {
            d[src] += gv;
        }
        Ok(vec![Some(dx)])
    }
}

struct Upsample {
    f: usize,
}

impl<F: Real> Backward<F> for Upsample {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (planes, h, w) = plane_dims(inputs[0].shape())?;
        let f = self.f;
        let (oh, ow) = (h * f, w * f);
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for p in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    d[(p * h + y / f) * w + x / f] += g.data()[(p * oh + y) * ow + x];
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

impl<F: Real> Tape<F> {
    /// Non-overlapping `k x k` average pooling; extents must divide by `k`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = plane_dims(&shape)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err!("avg_pool2d({k}) of spatial extent {h}x{w}"));
        }
        if k == 1 {
            return self.reshape(x, &shape);
        }
        let (oh, ow) = (h / k, w / k);
        let scale = F::one() / F::of((k * k) as f64);
        let mut out = Tensor::zeros(&with_plane(&shape, oh, ow));
        {
            let src = self.value(x).data();
            let d = out.data_mut();
            for p in 0..planes {
                for y in 0..h {
                    for xx in 0..w {
                        d[(p * oh + y / k) * ow + xx / k] += src[(p * h + y) * w + xx];
                    }
                }
            }
            d.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(self.push(out, &[x], AvgPool { k }))
    }

    /// Max pooling onto a fixed `oh x ow` grid. Bin `i` covers
    /// `[floor(i*H/oh), ceil((i+1)*H/oh))`.
    pub fn adaptive_max_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = plane_dims(&shape)?;
        if oh == 0 || ow == 0 {
            return Err(shape_err!("adaptive pool to empty grid"));
        }
        let bin = |i: usize, n: usize, o: usize| (i * n / o, ((i + 1) * n).div_ceil(o));
        let mut out = Tensor::zeros(&with_plane(&shape, oh, ow));
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        {
            let src = self.value(x).data();
            let d = out.data_mut();
            for p in 0..planes {
                for i in 0..oh {
                    let (y0, y1) = bin(i, h, oh);
                    for j in 0..ow {
                        let (x0, x1) = bin(j, w, ow);
                        let mut best = (p * h + y0) * w + x0;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                let k = (p * h + y) * w + xx;
                                if src[k] > src[best] {
                                    best = k;
                                }
                            }
                        }
                        d[(p * oh + i) * ow + j] = src[best];
                        argmax.push(best);
                    }
                }
            }
        }
        Ok(self.push(out, &[x], AdaptiveMax { argmax }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest2d(&mut self, x: Var, f: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = plane_dims(&shape)?;
        if f == 0 {
            return Err(shape_err!("upsample factor must be >= 1"));
        }
        let (oh, ow) = (h * f, w * f);
        let mut out = Tensor::zeros(&with_plane(&shape, oh, ow));
        {
            let src = self.value(x).data();
            let d = out.data_mut();
            for p in 0..planes {
                for y in 0..oh {
                    for xx in 0..ow {
                        d[(p * oh + y) * ow + xx] = src[(p * h + y / f) * w + xx / f];
                    }
                }
            }
        }
        Ok(self.push(out, &[x], Upsample { f }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_shapes_and_values() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let p = t.avg_pool2d(x, 2).unwrap();
        assert_eq!(t.value(p).data(), &[2.5, 4.5, 10.5, 12.5]);
        let m = t.adaptive_max_pool2d(x, 2, 2).unwrap();
        assert_eq!(t.value(m).data(), &[5.0, 7.0, 13.0, 15.0]);
        let u = t.upsample_nearest2d(p, 2).unwrap();
        assert_eq!(t.shape(u), &[1, 1, 4, 4]);
        assert_eq!(t.value(u).at(&[0, 0, 3, 1]), 10.5);
    }

    #[test]
    fn adaptive_pool_overlapping_bins() {
        // 5 -> 4 bins: [0,2), [1,3), [2,4), [3,5)
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new([1, 5], vec![5.0, 1.0, 0.0, 7.0, 2.0]).unwrap());
        let m = t.adaptive_max_pool2d(x, 1, 4).unwrap();
        assert_eq!(t.value(m).data(), &[5.0, 1.0, 7.0, 7.0]);
    }
}
