//! Fused normalization primitives.
//!
//! Inputs are laid out as `[G * B, C, ...]`: `G` independent groups (for
//! example time steps) of `B` samples each. Statistics are per `(group, channel)`.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{numel, Tensor};

/// Per `(group, channel)` batch moments, row-major `[G, C]`.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub groups: usize,
    pub channels: usize,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

#[derive(Clone, Copy)]
struct Layout {
    groups: usize,
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl Layout {
    fn new(shape: &[usize], groups: usize) -> Result<Self> {
        if shape.len() < 2 || groups == 0 || shape[0] % groups != 0 {
            return Err(shape_err!(
                "normalization of {shape:?} with {groups} groups"
            ));
        }
        Ok(Layout {
            groups,
            batch: shape[0] / groups,
            channels: shape[1],
            spatial: numel(&shape[2..]),
        })
    }

    /// Calls `f(group, channel, contiguous slice range)` for every block.
    fn blocks(&self, mut f: impl FnMut(usize, usize, std::ops::Range<usize>)) {
        for g in 0..self.groups {
            for b in 0..self.batch {
                for c in 0..self.channels {
                    let start = ((g * self.batch + b) * self.channels + c) * self.spatial;
                    f(g, c, start..start + self.spatial);
                }
            }
        }
    }
}

struct BatchNorm<F> {
    layout: Layout,
    inv_std: Vec<F>,
}

impl<F: Real> Backward<F> for BatchNorm<F> {
    fn backward(&self, g: &Tensor<F>, _: &[&Tensor<F>], y: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let l = self.layout;
        let n = F::of((l.batch * l.spatial) as f64);
        let mut sum_g = vec![F::zero(); l.groups * l.channels];
        let mut sum_gy = vec![F::zero(); l.groups * l.channels];
        let (gd, yd) = (g.data(), y.data());
        l.blocks(|gr, c, r| {
            let k = gr * l.channels + c;
            for i in r {
                sum_g[k] += gd[i];
                sum_gy[k] += gd[i] * yd[i];
            }
        });
        let mut dx = Tensor::zeros(y.shape());
        let d = dx.data_mut();
        l.blocks(|gr, c, r| {
            let k = gr * l.channels + c;
            let (mg, mgy) = (sum_g[k] / n, sum_gy[k] / n);
            for i in r {
                d[i] = self.inv_std[k] * (gd[i] - mg - yd[i] * mgy);
            }
        });
        Ok(vec![Some(dx)])
    }
}

/// `y = x * gamma[b, c] + beta[b, c]`, shared across groups.
struct Modulate {
    layout: Layout,
}

impl<F: Real> Backward<F> for Modulate {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let l = self.layout;
        let mut dx = Tensor::zeros(x.shape());
        let mut dgamma = Tensor::zeros(gamma.shape());
        let mut dbeta = Tensor::zeros(gamma.shape());
        let (gd, xd, gam) = (g.data(), x.data(), gamma.data());
        for gr in 0..l.groups {
            for b in 0..l.batch {
                for c in 0..l.channels {
                    let k = b * l.channels + c;
                    let start = ((gr * l.batch + b) * l.channels + c) * l.spatial;
                    let mut sg = F::zero();
                    let mut sgx = F::zero();
                    for i in start..start + l.spatial {
                        dx.data_mut()[i] = gd[i] * gam[k];
                        sg += gd[i];
                        sgx += gd[i] * xd[i];
                    }
                    dgamma.data_mut()[k] += sgx;
                    dbeta.data_mut()[k] += sg;
                }
            }
        }
        Ok(vec![Some(dx), Some(dgamma), Some(dbeta)])
    }
}

/// Affine map with constant per-channel coefficients.
struct ChannelAffine<F> {
    layout: Layout,
    scale: Vec<F>,
}

impl<F: Real> Backward<F> for ChannelAffine<F> {
    fn backward(&self, g: &Tensor<F>, _: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let mut dx = g.clone();
        let d = dx.data_mut();
        self.layout.blocks(|_, c, r| {
            for i in r {
                d[i] *= self.scale[c];
            }
        });
        Ok(vec![Some(dx)])
    }
}

impl<F: Real> Tape<F> {
    /// Standardizes `x [G*B, C, ...]` with batch statistics per `(group, channel)`.
    /// Returns the normalized value and the (biased) moments used.
    pub fn batch_norm(&mut self, x: Var, groups: usize, eps: F) -> Result<(Var, BatchStats<F>)> {
        let layout = Layout::new(self.shape(x), groups)?;
        if layout.batch * layout.spatial < 2 {
            return Err(shape_err!(
                "batch normalization over a single element per channel is degenerate"
            ));
        }
        let gc = layout.groups * layout.channels;
        let n = F::of((layout.batch * layout.spatial) as f64);
        let xd = self.value(x).data();
        let mut mean = vec![F::zero(); gc];
        layout.blocks(|g, c, r| {
            mean[g * layout.channels + c] += xd[r].iter().copied().sum::<F>();
        });
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![F::zero(); gc];
        layout.blocks(|g, c, r| {
            let k = g * layout.channels + c;
            var[k] += xd[r].iter().map(|&v| (v - mean[k]) * (v - mean[k])).sum::<F>();
        });
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<F> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        layout.blocks(|g, c, r| {
            let k = g * layout.channels + c;
            for i in r {
                d[i] = (d[i] - mean[k]) * inv_std[k];
            }
        });
        let stats = BatchStats {
            groups: layout.groups,
            channels: layout.channels,
            mean,
            var,
        };
        Ok((self.push(out, &[x], BatchNorm { layout, inv_std }), stats))
    }

    /// `(x - mean[c]) / sqrt(var[c] + eps)` with constant statistics.
    pub fn normalize_with(&mut self, x: Var, mean: &[F], var: &[F], eps: F) -> Result<Var> {
        let layout = Layout::new(self.shape(x), 1)?;
        if mean.len() != layout.channels || var.len() != layout.channels {
            return Err(shape_err!(
                "{} channels but {} means / {} variances",
                layout.channels,
                mean.len(),
                var.len()
            ));
        }
        let scale: Vec<F> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        layout.blocks(|_, c, r| {
            for i in r {
                d[i] = (d[i] - mean[c]) * scale[c];
            }
        });
        Ok(self.push(out, &[x], ChannelAffine { layout, scale }))
    }

    /// Per-sample, per-channel scale and offset: `x [G*B, C, ...]`,
    /// `gamma, beta [B, C]`.
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let layout = Layout::new(self.shape(x), groups)?;
        let want = [layout.batch, layout.channels];
        if self.shape(gamma) != want || self.shape(beta) != want {
            return Err(shape_err!(
                "modulation {:?}/{:?} does not match {want:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let mut out = self.value(x).clone();
        {
            let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
            let d = out.data_mut();
            for gr in 0..layout.groups {
                for b in 0..layout.batch {
                    for c in 0..layout.channels {
                        let k = b * layout.channels + c;
                        let start = ((gr * layout.batch + b) * layout.channels + c) * layout.spatial;
                        for v in &mut d[start..start + layout.spatial] {
                            *v = *v * gam[k] + bet[k];
                        }
                    }
                }
            }
        }
        Ok(self.push(out, &[x, gamma, beta], Modulate { layout }))
    }
}
