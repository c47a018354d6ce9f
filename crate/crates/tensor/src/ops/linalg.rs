use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// Batched product `[b, m, k] x [b, k, n]`; plain matmul uses `b = 1`.
struct Bmm {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl<F: Real> Backward<F> for Bmm {
    fn backward(&self, g: &Tensor<F>, inputs: &[&Tensor<F>], _: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let Bmm { batch, m, k, n } = *self;
        let mut da = Tensor::zeros(a.shape());
        let mut db = Tensor::zeros(b.shape());
        for i in 0..batch {
            let gi = &g.data()[i * m * n..(i + 1) * m * n];
            let ai = &a.data()[i * m * k..(i + 1) * m * k];
            let bi = &b.data()[i * k * n..(i + 1) * k * n];
            // dA = G Bᵀ, dB = Aᵀ G
            F::gemm(false, true, m, n, k, F::one(), gi, bi, F::zero(), &mut da.data_mut()[i * m * k..(i + 1) * m * k]);
            F::gemm(true, false, k, m, n, F::one(), ai, gi, F::zero(), &mut db.data_mut()[i * k * n..(i + 1) * k * n]);
        }
        Ok(vec![Some(da), Some(db)])
    }
}

impl<F: Real> Tape<F> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul of {sa:?} and {sb:?}"));
        }
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(
            value,
            &[a, b],
            Bmm {
                batch: 1,
                m: sa[0],
                k: sa[1],
                n: sb[1],
            },
        ))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err!("bmm of {sa:?} and {sb:?}"));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                F::gemm(
                    false,
                    false,
                    m,
                    k,
                    n,
                    F::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    F::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new([batch, m, n], out)?;
        Ok(self.push(value, &[a, b], Bmm { batch, m, k, n }))
    }

    /// `x [n, in] · wᵀ + b` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wt = self.transpose2(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            Some(b) => self.bias_add(y, b, 1),
            None => Ok(y),
        }
    }
}
