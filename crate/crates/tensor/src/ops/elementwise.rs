use crate::error::Result;
use crate::real::Real;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<F: Real> Backward<F> for Binary {
    fn backward(
        &self,
        g: &Tensor<F>,
        inputs: &[&Tensor<F>],
        _out: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        Ok(match self {
            Binary::Add => vec![Some(g.clone()), Some(g.clone())],
            Binary::Sub => vec![Some(g.clone()), Some(g.map(|x| -x))],
            Binary::Mul => vec![Some(g.zip_map(b, |g, b| g * b)?), Some(g.zip_map(a, |g, a| g * a)?)],
            Binary::Div => {
                let ga = g.zip_map(b, |g, b| g / b)?;
                let mut gb = g.zip_map(a, |g, a| g * a)?;
                for (x, &bv) in gb.data_mut().iter_mut().zip(b.data()) {
                    *x = -*x / (bv * bv);
                }
                vec![Some(ga), Some(gb)]
            }
        })
    }
}

#[derive(Clone, Copy)]
enum Unary<F> {
    AddScalar,
    MulScalar(F),
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Ln,
    Recip,
    Sqrt,
}

impl<F: Real> Backward<F> for Unary<F> {
    fn backward(
        &self,
        g: &Tensor<F>,
        inputs: &[&Tensor<F>],
        out: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let x = inputs[0];
        let one = F::one();
        let dx = match *self {
            Unary::AddScalar => g.clone(),
            Unary::MulScalar(c) => g.scale(c),
            Unary::Sigmoid => g.zip_map(out, |g, y| g * y * (one - y))?,
            Unary::Tanh => g.zip_map(out, |g, y| g * (one - y * y))?,
            Unary::Relu => g.zip_map(x, |g, x| if x > F::zero() { g } else { F::zero() })?,
            Unary::Exp => g.zip_map(out, |g, y| g * y)?,
            Unary::Ln => g.zip_map(x, |g, x| g / x)?,
            Unary::Recip => g.zip_map(out, |g, y| -g * y * y)?,
            Unary::Sqrt => g.zip_map(out, |g, y| g / (F::of(2.0) * y))?,
        };
        Ok(vec![Some(dx)])
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    // Split by sign so exp never overflows.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Real> Tape<F> {
    fn binary(&mut self, a: Var, b: Var, op: Binary, f: impl Fn(F, F) -> F) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(value, &[a, b], op))
    }

    fn unary(&mut self, x: Var, op: Unary<F>, f: impl Fn(F) -> F) -> Var {
        let value = self.value(x).map(f);
        self.push(value, &[x], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, |a, b| a + b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, |a, b| a - b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, |a, b| a * b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, |a, b| a / b)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Unary::AddScalar, |x| x + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Unary::MulScalar(c), |x| x * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -F::one())
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, F::one())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh, |x| x.tanh())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu, |x| x.max(F::zero()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp, |x| x.exp())
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln, |x| x.ln())
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Recip, |x| x.recip())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt, |x| x.sqrt())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `u * a + (1 - u) * b`, the gated blend used by recurrent units.
    pub fn lerp(&mut self, u: Var, a: Var, b: Var) -> Result<Var> {
        let ua = self.mul(u, a)?;
        let v = self.one_minus(u);
        let vb = self.mul(v, b)?;
        self.add(ua, vb)
    }
}
