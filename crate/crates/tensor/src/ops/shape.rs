use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{numel, split_at_axis, Tensor};

struct Reshape {
    from: Vec<usize>,
}

impl<F: Real> Backward<F> for Reshape {
    fn backward(&self, g: &Tensor<F>, _: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(g.reshape(&self.from)?)])
    }
}

struct Permute {
    inverse: Vec<usize>,
}

impl<F: Real> Backward<F> for Permute {
    fn backward(&self, g: &Tensor<F>, _: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(g.permute(&self.inverse)?)])
    }
}

struct Narrow {
    axis: usize,
    start: usize,
}

impl<F: Real> Backward<F> for Narrow {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let shape = inputs[0].shape();
        let (outer, ext, inner) = split_at_axis(shape, self.axis);
        let len = g.shape()[self.axis];
        let mut dx = Tensor::zeros(shape);
        let d = dx.data_mut();
        for o in 0..outer {
            let dst = (o * ext + self.start) * inner;
            let src = o * len * inner;
            d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
        }
        Ok(vec![Some(dx)])
    }
}

struct Concat {
    axis: usize,
}

impl<F: Real> Backward<F> for Concat {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            let len = x.shape()[self.axis];
            out.push(Some(g.narrow(self.axis, start, len)?));
            start += len;
        }
        Ok(out)
    }
}

struct IndexSelect {
    axis: usize,
    indices: Vec<usize>,
}

impl<F: Real> Backward<F> for IndexSelect {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let shape = inputs[0].shape();
        let (outer, ext, inner) = split_at_axis(shape, self.axis);
        let n = self.indices.len();
        let mut dx = Tensor::zeros(shape);
        let d = dx.data_mut();
        for o in 0..outer {
            for (j, &i) in self.indices.iter().enumerate() {
                let dst = (o * ext + i) * inner;
                let src = (o * n + j) * inner;
                for t in 0..inner {
                    d[dst + t] += g.data()[src + t];
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Broadcast of size-1 axes; the adjoint sums over the broadcast axes.
struct Expand {
    from: Vec<usize>,
}

fn expand_data<F: Real>(x: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    let src = x.shape();
    let out_n = numel(shape);
    let rank = shape.len();
    let src_strides = crate::tensor::strides(src);
    let mut data = Vec::with_capacity(out_n);
    let mut idx = vec![0usize; rank];
    for _ in 0..out_n {
        let mut off = 0;
        for a in 0..rank {
            if src[a] != 1 {
                off += idx[a] * src_strides[a];
            }
        }
        data.push(x.data()[off]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor::new(shape.to_vec(), data).expect("expand shape")
}

fn reduce_to<F: Real>(g: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    let gs = g.shape();
    let rank = gs.len();
    let dst_strides = crate::tensor::strides(shape);
    let mut out = Tensor::zeros(shape);
    let d = out.data_mut();
    let mut idx = vec![0usize; rank];
    for &v in g.data() {
        let mut off = 0;
        for a in 0..rank {
            if shape[a] != 1 {
                off += idx[a] * dst_strides[a];
            }
        }
        d[off] += v;
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < gs[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

impl<F: Real> Backward<F> for Expand {
    fn backward(&self, g: &Tensor<F>, _: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(reduce_to(g, &self.from))])
    }
}

/// Zero padding of the last two axes.
struct Pad2d {
    pad: usize,
}

impl<F: Real> Backward<F> for Pad2d {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let shape = inputs[0].shape();
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        let planes = numel(&shape[..r - 2]);
        let mut dx = Tensor::zeros(shape);
        let d = dx.data_mut();
        for p in 0..planes {
            for y in 0..h {
                let src = p * hp * wp + (y + self.pad) * wp + self.pad;
                let dst = p * h * w + y * w;
                d[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
            }
        }
        Ok(vec![Some(dx)])
    }
}

impl<F: Real> Tape<F> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, &[x], Reshape { from }))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.push(value, &[x], Permute { inverse }))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(shape_err!("transpose2 of shape {:?}", self.shape(x)));
        }
        self.permute(x, &[1, 0])
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(value, &[x], Narrow { axis, start }))
    }

    /// Concatenation along `axis`; `[a; b]` in channel terms is `axis = 1`.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let parts: Vec<&Tensor<F>> = xs.iter().map(|&v| self.value(v)).collect();
            Tensor::concat(&parts, axis)?
        };
        Ok(self.push(value, xs, Concat { axis }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(x));
            lifted.push(self.reshape(x, &s)?);
        }
        self.concat(&lifted, 0)
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).index_select(axis, indices)?;
        Ok(self.push(
            value,
            &[x],
            IndexSelect {
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Broadcasts size-1 axes of `x` up to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        if from.len() != shape.len()
            || from.iter().zip(shape).any(|(&a, &b)| a != b && a != 1)
        {
            return Err(shape_err!("cannot expand {from:?} to {shape:?}"));
        }
        let value = expand_data(self.value(x), shape);
        Ok(self.push(value, &[x], Expand { from }))
    }

    /// Zero-pads the last two axes by `pad` on every side.
    pub fn pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(shape_err!("pad2d needs rank >= 2, got {shape:?}"));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let planes = numel(&shape[..r - 2]);
        let mut out_shape = shape.clone();
        out_shape[r - 2] = hp;
        out_shape[r - 1] = wp;
        let mut out = Tensor::zeros(&out_shape);
        {
            let src = self.value(x).data();
            let d = out.data_mut();
            for p in 0..planes {
                for y in 0..h {
                    let dst = p * hp * wp + (y + pad) * wp + pad;
                    let s = p * h * w + y * w;
                    d[dst..dst + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        Ok(self.push(out, &[x], Pad2d { pad }))
    }

    /// Adds `bias[d]` along `axis` of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.shape(bias) != [xs[axis]] {
            return Err(shape_err!(
                "bias {:?} does not match axis {axis} of {xs:?}",
                self.shape(bias)
            ));
        }
        let mut s = vec![1; xs.len()];
        s[axis] = xs[axis];
        let b = self.reshape(bias, &s)?;
        let b = self.expand(b, &xs)?;
        self.add(x, b)
    }
}
