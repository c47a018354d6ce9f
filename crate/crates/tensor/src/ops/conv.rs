//! 2-D and 3-D cross-correlation via im2col + GEMM.
//!
//! Both share one volumetric kernel; a 2-D convolution is the `t = kt = 1`
//! case.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    pad: [usize; 3],
    stride: usize,
    output: [usize; 3],
}

impl Geometry {
    fn new(
        batch: usize,
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        pad: [usize; 3],
        stride: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err!("convolution stride must be >= 1"));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad[a];
            if span < kernel[a] {
                return Err(shape_err!(
                    "kernel extent {} exceeds padded input extent {span}",
                    kernel[a]
                ));
            }
            if (span - kernel[a]) % stride != 0 {
                return Err(shape_err!(
                    "output size not exact: ({} + 2*{} - {}) is not divisible by stride {stride}",
                    input[a],
                    pad[a],
                    kernel[a]
                ));
            }
            output[a] = (span - kernel[a]) / stride + 1;
        }
        Ok(Geometry {
            batch,
            cin,
            cout,
            input,
            kernel,
            pad,
            stride,
            output,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    fn out_len(&self) -> usize {
        self.cout * self.cols()
    }

    /// Visits every (column index, input offset) pair whose tap falls
    /// inside the unpadded input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [t, h, w] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [pt, ph, pw] = self.pad;
        let [ot, oh, ow] = self.output;
        let s = self.stride;
        let ncols = self.cols();
        for c in 0..self.cin {
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let row = ((c * kt + dt) * kh + dy) * kw + dx;
                        for zt in 0..ot {
                            let it = (zt * s + dt) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for zy in 0..oh {
                                let iy = (zy * s + dy) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = ((c * t + it as usize) * h + iy as usize) * w;
                                let col_row = row * ncols + (zt * oh + zy) * ow;
                                for zx in 0..ow {
                                    let ix = (zx * s + dx) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    f(col_row + zx, in_row + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<F: Real>(&self, x: &[F], cols: &mut [F]) {
        cols.iter_mut().for_each(|c| *c = F::zero());
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
    }

    fn col2im_add<F: Real>(&self, cols: &[F], dx: &mut [F]) {
        self.for_each_tap(|ci, xi| dx[xi] += cols[ci]);
    }

    fn forward<F: Real>(&self, x: &[F], w: &[F], b: &[F]) -> Vec<F> {
        let (k, p) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); self.batch * self.out_len()];
        let mut cols = vec![F::zero(); k * p];
        for n in 0..self.batch {
            self.im2col(&x[n * self.in_len()..(n + 1) * self.in_len()], &mut cols);
            let o = &mut out[n * self.out_len()..(n + 1) * self.out_len()];
            for (co, chunk) in o.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[co]);
            }
            F::gemm(false, false, self.cout, k, p, F::one(), w, &cols, F::one(), o);
        }
        out
    }

    fn backward<F: Real>(&self, g: &[F], x: &[F], w: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
        let (k, p) = (self.rows(), self.cols());
        let mut dx = vec![F::zero(); self.batch * self.in_len()];
        let mut dw = vec![F::zero(); self.cout * k];
        let mut db = vec![F::zero(); self.cout];
        let mut cols = vec![F::zero(); k * p];
        let mut dcols = vec![F::zero(); k * p];
        for n in 0..self.batch {
            let gn = &g[n * self.out_len()..(n + 1) * self.out_len()];
            for (co, chunk) in gn.chunks(p).enumerate() {
                db[co] += chunk.iter().copied().sum::<F>();
            }
            self.im2col(&x[n * self.in_len()..(n + 1) * self.in_len()], &mut cols);
            F::gemm(false, true, self.cout, p, k, F::one(), gn, &cols, F::one(), &mut dw);
            F::gemm(true, false, k, self.cout, p, F::one(), w, gn, F::zero(), &mut dcols);
            self.col2im_add(&dcols, &mut dx[n * self.in_len()..(n + 1) * self.in_len()]);
        }
        (dx, dw, db)
    }
}

struct Conv {
    geom: Geometry,
}

impl<F: Real> Backward<F> for Conv {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (dx, dw, db) = self.geom.backward(g.data(), x.data(), w.data());
        Ok(vec![
            Some(Tensor::new(x.shape().to_vec(), dx)?),
            Some(Tensor::new(w.shape().to_vec(), dw)?),
            Some(Tensor::new(b.shape().to_vec(), db)?),
        ])
    }
}

fn check_conv_args(
    xs: &[usize],
    ws: &[usize],
    bs: &[usize],
    rank: usize,
) -> Result<()> {
    if xs.len() != rank || ws.len() != rank {
        return Err(shape_err!(
            "convolution expects rank-{rank} input and weight, got {xs:?} and {ws:?}"
        ));
    }
    if ws[1] != xs[1] {
        return Err(shape_err!(
            "input has {} channels but weight {ws:?} expects {}",
            xs[1],
            ws[1]
        ));
    }
    if bs != [ws[0]] {
        return Err(shape_err!("bias {bs:?} does not match {} output channels", ws[0]));
    }
    let spatial = &ws[rank - 2..];
    if spatial[0] != spatial[1] || spatial[0] % 2 == 0 {
        return Err(shape_err!("kernel must be square with odd extent, got {ws:?}"));
    }
    Ok(())
}

impl<F: Real> Tape<F> {
    /// `input [B, Cin, H, W]`, `weight [Cout, Cin, k, k]`, `bias [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: usize, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        check_conv_args(&xs, &ws, self.shape(b), 4)?;
        let geom = Geometry::new(
            xs[0],
            xs[1],
            ws[0],
            [1, xs[2], xs[3]],
            [1, ws[2], ws[3]],
            [0, padding, padding],
            stride,
        )?;
        let data = geom.forward(self.value(x).data(), self.value(w).data(), self.value(b).data());
        let value = Tensor::new([xs[0], ws[0], geom.output[1], geom.output[2]], data)?;
        Ok(self.push(value, &[x, w, b], Conv { geom }))
    }

    /// `input [B, Cin, T, H, W]`, `weight [Cout, Cin, kt, k, k]`, `bias [Cout]`.
    /// Padding and stride apply to all three axes.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, padding: usize, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        check_conv_args(&xs, &ws, self.shape(b), 5)?;
        if ws[2] % 2 == 0 {
            return Err(shape_err!("temporal kernel extent must be odd, got {}", ws[2]));
        }
        let geom = Geometry::new(
            xs[0],
            xs[1],
            ws[0],
            [xs[2], xs[3], xs[4]],
            [ws[2], ws[3], ws[4]],
            [padding; 3],
            stride,
        )?;
        let data = geom.forward(self.value(x).data(), self.value(w).data(), self.value(b).data());
        let [ot, oh, ow] = geom.output;
        let value = Tensor::new([xs[0], ws[0], ot, oh, ow], data)?;
        Ok(self.push(value, &[x, w, b], Conv { geom }))
    }
}
