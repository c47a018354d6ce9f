//! Kernel-based warping: depthwise, locally connected filtering of a feature
//! map with per-position `k x k` kernels, and the hypernetworks that predict
//! those kernels.
//!
//! Layouts (batch first):
//! - pixelwise kernels `W`: `[B, H, W, k²]`, index `q = m·k + n`;
//! - factorized kernel bank `w`: `[B, k², N]`, selection map `S`: `[B, H, W, N]`.

use serde::{Deserialize, Serialize};
use vidpred_tensor::{Backward, Real, Tape, Tensor, TensorError, Var};

use crate::error::{invalid, Result};
use crate::layers::{Conv, Linear};
use crate::params::{Cx, Init};

/// Kernel extent for a flattened kernel of `k2` taps.
pub fn kernel_size(k2: usize) -> Result<usize> {
    let k = (k2 as f64).sqrt().round() as usize;
    if k * k != k2 || k % 2 == 0 {
        return Err(invalid(format!("{k2} taps is not an odd square kernel")));
    }
    Ok(k)
}

/// `W[b,i,j,q] = Σ_l S[b,i,j,l] · w[b,q,l]`.
pub fn combine_factorized<F: Real>(tape: &mut Tape<F>, kernels: Var, selection: Var) -> Result<Var> {
    let (ks, ss) = (tape.shape(kernels).to_vec(), tape.shape(selection).to_vec());
    if ks.len() != 3 || ss.len() != 4 || ks[0] != ss[0] || ks[2] != ss[3] {
        return Err(invalid(format!(
            "kernel bank {ks:?} and selection map {ss:?} disagree (expected [B, k², N] and [B, H, W, N])"
        )));
    }
    let (b, k2, n) = (ks[0], ks[1], ks[2]);
    let (h, w) = (ss[1], ss[2]);
    let s = tape.reshape(selection, &[b, h * w, n])?;
    let wt = tape.permute(kernels, &[0, 2, 1])?;
    let out = tape.bmm(s, wt)?;
    Ok(tape.reshape(out, &[b, h, w, k2])?)
}

struct WarpGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl WarpGeom {
    /// Calls `f(h index, out index, kernel index)` for every in-bounds tap.
    #[inline]
    fn taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w, k) = (self.h as isize, self.w as isize, self.k);
        let r = (k as isize - 1) / 2;
        let plane = self.h * self.w;
        for b in 0..self.b {
            for i in 0..h {
                for j in 0..w {
                    let pix = (b * self.h + i as usize) * self.w + j as usize;
                    for m in 0..k {
                        let y = i + m as isize - r;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for n in 0..k {
                            let x = j + n as isize - r;
                            if x < 0 || x >= w {
                                continue;
                            }
                            let q = pix * k * k + m * k + n;
                            let src = (y * w + x) as usize;
                            let dst = i as usize * self.w + j as usize;
                            for c in 0..self.c {
                                let base = (b * self.c + c) * plane;
                                f(base + src, base + dst, q);
                            }
                        }
                    }
                }
            }
        }
    }
}

struct WarpOp {
    geom: WarpGeom,
}

impl<F: Real> Backward<F> for WarpOp {
    fn backward(
        &self,
        g: &Tensor<F>,
        inputs: &[&Tensor<F>],
        _: &Tensor<F>,
    ) -> std::result::Result<Vec<Option<Tensor<F>>>, TensorError> {
        let (h, kern) = (inputs[0], inputs[1]);
        let mut dh = Tensor::zeros(h.shape());
        let mut dk = Tensor::zeros(kern.shape());
        {
            let (gd, hd, kd) = (g.data(), h.data(), kern.data());
            let (dhd, dkd) = (dh.data_mut(), dk.data_mut());
            self.geom.taps(|src, dst, q| {
                dhd[src] += gd[dst] * kd[q];
                dkd[q] += gd[dst] * hd[src];
            });
        }
        Ok(vec![Some(dh), Some(dk)])
    }
}

/// `h̃[b,c,i,j] = Σ_{m,n} W[b,i,j,m·k+n] · h[b,c,i+m−r,j+n−r]`, `r = (k−1)/2`,
/// with zero padding. The same kernel applies to every channel.
pub fn warp_apply<F: Real>(tape: &mut Tape<F>, h: Var, kernels: Var) -> Result<Var> {
    let (hs, ks) = (tape.shape(h).to_vec(), tape.shape(kernels).to_vec());
    if hs.len() != 4 || ks.len() != 4 || hs[0] != ks[0] || hs[2] != ks[1] || hs[3] != ks[2] {
        return Err(invalid(format!(
            "features {hs:?} and kernels {ks:?} disagree (expected [B, C, H, W] and [B, H, W, k²])"
        )));
    }
    let k = kernel_size(ks[3])?;
    let geom = WarpGeom {
        b: hs[0],
        c: hs[1],
        h: hs[2],
        w: hs[3],
        k,
    };
    let mut out = Tensor::zeros(&hs);
    {
        let (hd, kd) = (tape.value(h).data(), tape.value(kernels).data());
        let od = out.data_mut();
        geom.taps(|src, dst, q| od[dst] += kd[q] * hd[src]);
    }
    Ok(tape.push(out, &[h, kernels], WarpOp { geom }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpKind {
    Factorized,
    Pixelwise,
}

/// Predicted warp parameters as tape variables.
#[derive(Clone, Copy, Debug)]
pub enum WarpParams {
    Pixelwise(Var),
    Factorized { kernels: Var, selection: Var },
}

impl WarpParams {
    pub fn pixelwise<F: Real>(&self, tape: &mut Tape<F>) -> Result<Var> {
        match *self {
            WarpParams::Pixelwise(w) => Ok(w),
            WarpParams::Factorized { kernels, selection } => combine_factorized(tape, kernels, selection),
        }
    }
}

#[derive(Clone, Debug)]
enum Head {
    Factorized {
        conv: Conv,
        fc1: Linear,
        fc2: Linear,
        select: Conv,
        n: usize,
    },
    Pixelwise {
        conv1: Conv,
        conv2: Conv,
        out: Conv,
    },
}

/// The network `f(h_{t−1}, x_t)` predicting warp parameters.
#[derive(Clone, Debug)]
pub struct HyperNet {
    head: Head,
    pub k: usize,
    /// Softmax over the `k²` taps of each kernel-bank column.
    pub kernel_softmax: bool,
}

/// Output grid of the adaptive pooling in the factorized head.
pub const POOL_GRID: usize = 4;

impl HyperNet {
    /// `cin` is the channel count of `[h_{t−1}; x_t]`.
    pub fn new<F: Real>(
        init: &mut Init<'_, F>,
        name: &str,
        kind: WarpKind,
        cin: usize,
        k: usize,
        n: usize,
        kernel_softmax: bool,
    ) -> Self {
        let hid = (cin / 2).max(1);
        let mut s = init.scope(name);
        let head = match kind {
            WarpKind::Factorized => Head::Factorized {
                conv: Conv::new(&mut s, "conv", cin, hid, 3, 2, true),
                fc1: Linear::new(&mut s, "fc1", hid * POOL_GRID * POOL_GRID, hid, true, true),
                fc2: Linear::new(&mut s, "fc2", hid, k * k * n, true, true),
                select: Conv::new(&mut s, "select", cin, n, 3, 2, true),
                n,
            },
            WarpKind::Pixelwise => Head::Pixelwise {
                conv1: Conv::new(&mut s, "conv1", cin, hid, 3, 2, true),
                conv2: Conv::new(&mut s, "conv2", hid, hid, 3, 2, true),
                out: Conv::new(&mut s, "out", hid, k * k, 3, 2, true),
            },
        };
        HyperNet {
            head,
            k,
            kernel_softmax,
        }
    }

    pub fn kind(&self) -> WarpKind {
        match self.head {
            Head::Factorized { .. } => WarpKind::Factorized,
            Head::Pixelwise { .. } => WarpKind::Pixelwise,
        }
    }

    pub fn forward<F: Real>(&self, cx: &mut Cx<'_, F>, h_prev: Var, x: Var) -> Result<WarpParams> {
        let (hs, xs) = (cx.shape(h_prev), cx.shape(x));
        if hs.len() != 4 || xs.len() != 4 || hs[0] != xs[0] || hs[2..] != xs[2..] {
            return Err(invalid(format!(
                "hypernetwork inputs {hs:?} and {xs:?} differ in batch or resolution"
            )));
        }
        let (b, h, w) = (hs[0], hs[2], hs[3]);
        let k2 = self.k * self.k;
        let inp = cx.tape.concat(&[h_prev, x], 1)?;
        match &self.head {
            Head::Factorized {
                conv,
                fc1,
                fc2,
                select,
                n,
            } => {
                let f = conv.forward(cx, inp)?;
                let f = cx.tape.relu(f);
                let f = cx.tape.adaptive_max_pool2d(f, POOL_GRID, POOL_GRID)?;
                let flat = cx.tape.reshape(f, &[b, cx.shape(f)[1..].iter().product()])?;
                let z = fc1.forward(cx, flat)?;
                let z = cx.tape.relu(z);
                let z = fc2.forward(cx, z)?;
                let mut kernels = cx.tape.reshape(z, &[b, k2, *n])?;
                if self.kernel_softmax {
                    kernels = cx.tape.softmax(kernels, 1)?;
                }
                let s = select.forward(cx, inp)?;
                let s = cx.tape.softmax(s, 1)?;
                let selection = cx.tape.permute(s, &[0, 2, 3, 1])?;
                debug_assert_eq!(cx.shape(selection), vec![b, h, w, *n]);
                Ok(WarpParams::Factorized { kernels, selection })
            }
            Head::Pixelwise { conv1, conv2, out } => {
                let f = conv1.forward(cx, inp)?;
                let f = cx.tape.relu(f);
                let f = conv2.forward(cx, f)?;
                let f = cx.tape.relu(f);
                let f = out.forward(cx, f)?;
                let f = cx.tape.softmax(f, 1)?;
                Ok(WarpParams::Pixelwise(cx.tape.permute(f, &[0, 2, 3, 1])?))
            }
        }
    }
}

/// Pixelwise kernels `[B, H, W, k²]` that are one-hot at tap `(m, n)`.
pub fn one_hot_kernels<F: Real>(b: usize, h: usize, w: usize, k: usize, m: usize, n: usize) -> Tensor<F> {
    let k2 = k * k;
    let q = m * k + n;
    Tensor::from_fn(&[b, h, w, k2], |i| if i % k2 == q { F::one() } else { F::zero() })
}

/// Identity warp: one-hot at the kernel centre.
pub fn identity_kernels<F: Real>(b: usize, h: usize, w: usize, k: usize) -> Tensor<F> {
    one_hot_kernels(b, h, w, k, k / 2, k / 2)
}
