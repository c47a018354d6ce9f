use crate::error::Result;
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{split_at_axis, Tensor};

struct SumAll {
    scale: f64,
}

impl<F: Real> Backward<F> for SumAll {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let v = g.data()[0] * F::of(self.scale);
        Ok(vec![Some(Tensor::full(inputs[0].shape(), v))])
    }
}

struct SumAxis {
    axis: usize,
}

impl<F: Real> Backward<F> for SumAxis {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let shape = inputs[0].shape();
        let (outer, ext, inner) = split_at_axis(shape, self.axis);
        let mut dx = Tensor::zeros(shape);
        let d = dx.data_mut();
        for o in 0..outer {
            for e in 0..ext {
                let dst = (o * ext + e) * inner;
                d[dst..dst + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
            }
        }
        Ok(vec![Some(dx)])
    }
}

struct Softmax {
    axis: usize,
}

impl<F: Real> Backward<F> for Softmax {
    fn backward(&self, g: &Tensor<F>, _: &[&Tensor<F>], y: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (outer, ext, inner) = split_at_axis(y.shape(), self.axis);
        let mut dx = Tensor::zeros(y.shape());
        let (yd, gd) = (y.data(), g.data());
        let d = dx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * ext * inner + i;
                let mut dot = F::zero();
                for e in 0..ext {
                    let k = base + e * inner;
                    dot += gd[k] * yd[k];
                }
                for e in 0..ext {
                    let k = base + e * inner;
                    d[k] = yd[k] * (gd[k] - dot);
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Max-subtracted softmax along `axis` (plain tensor version).
pub fn softmax_tensor<F: Real>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    x.check_axis(axis)?;
    let (outer, ext, inner) = split_at_axis(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * ext * inner + i;
            let mut m = F::neg_infinity();
            for e in 0..ext {
                m = m.max(d[base + e * inner]);
            }
            let mut s = F::zero();
            for e in 0..ext {
                let k = base + e * inner;
                d[k] = (d[k] - m).exp();
                s += d[k];
            }
            for e in 0..ext {
                d[base + e * inner] /= s;
            }
        }
    }
    Ok(out)
}

impl<F: Real> Tape<F> {
    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, &[x], SumAll { scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let value = Tensor::scalar(self.value(x).sum() / F::of(n));
        self.push(value, &[x], SumAll { scale: 1.0 / n })
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.check_axis(axis)?;
        let (outer, ext, inner) = split_at_axis(xv.shape(), axis);
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &xv.data()[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, &[x], SumAxis { axis }))
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax_tensor(self.value(x), axis)?;
        Ok(self.push(value, &[x], Softmax { axis }))
    }
}
