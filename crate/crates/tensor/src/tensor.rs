use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result, TensorError};
use crate::real::{DType, Real};

const MAGIC: &[u8; 4] = b"TNSR";
const FORMAT_VERSION: u32 = 1;

/// Dense row-major array.
///
/// The empty shape `[]` denotes a scalar holding one element. Every extent is
/// at least one.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(shape_err!("zero extent in shape {shape:?}"));
    }
    Ok(())
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(shape_err!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> F) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(f).collect(),
        }
    }

    /// Standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| F::of(rng.sample::<f64, _>(StandardNormal)))
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| F::of(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> F {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of range for axis {i} of extent {d}");
            off = off * d + ix;
        }
        self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != self.numel() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_reshaped(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != self.numel() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| G::of(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::of(self.numel() as f64)
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum::<F>().sqrt()
    }

    pub(crate) fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                axis,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return Err(shape_err!("permutation {axes:?} for rank {rank}"));
        }
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(shape_err!("invalid permutation {axes:?}"));
            }
            seen[a] = true;
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.numel());
        if rank == 0 {
            return Ok(self.clone());
        }
        // Odometer over the output index; the innermost axis is copied in a tight loop.
        let last = rank - 1;
        let inner_len = out_shape[last];
        let inner_stride = src_strides[last];
        let mut idx = vec![0usize; rank];
        let outer: usize = out_shape[..last].iter().product();
        for _ in 0..outer {
            let base: usize = idx[..last]
                .iter()
                .zip(&src_strides[..last])
                .map(|(i, s)| i * s)
                .sum();
            for j in 0..inner_len {
                data.push(self.data[base + j * inner_stride]);
            }
            for ax in (0..last).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.check_axis(axis)?;
        if len == 0 || start + len > self.shape[axis] {
            return Err(shape_err!(
                "narrow [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                self.shape
            ));
        }
        let (outer, ext, inner) = split_at_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        first.check_axis(axis)?;
        let mut total = 0;
        for p in parts {
            if p.rank() != first.rank()
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!(
                    "concat along axis {axis}: {:?} vs {:?}",
                    first.shape,
                    p.shape
                ));
            }
            total += p.shape[axis];
        }
        let (outer, _, inner) = split_at_axis(&first.shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        self.check_axis(axis)?;
        if indices.is_empty() {
            return Err(shape_err!("index_select with no indices"));
        }
        let (outer, ext, inner) = split_at_axis(&self.shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= ext) {
            return Err(shape_err!("index {bad} out of range for axis extent {ext}"));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * ext + i) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// 2-D matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(shape_err!(
                "matmul of {:?} and {:?}",
                self.shape,
                other.shape
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(false, false, m, k, n, F::one(), &self.data, &other.data, F::zero(), &mut out);
        Tensor::new([m, n], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(shape_err!("transpose of rank {} tensor", self.rank()));
        }
        self.permute(&[1, 0])
    }

    pub fn dtype(&self) -> DType {
        F::DTYPE
    }

    /// Writes the binary record: magic, version, dtype, rank, extents, data.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.rank() + self.numel() * F::DTYPE.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(F::DTYPE.code());
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 10];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(TensorError::Format("bad tensor magic".into()));
        }
        let version = u32::from_le_bytes([head[4], head[5], head[6], head[7]]);
        if version != FORMAT_VERSION {
            return Err(TensorError::Format(format!(
                "unsupported tensor format version {version}"
            )));
        }
        let dtype = DType::from_code(head[8])
            .ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", head[8])))?;
        let rank = head[9] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        check_shape(&shape)?;
        let n = numel(&shape);
        let mut raw = vec![0u8; n * dtype.size()];
        r.read_exact(&mut raw)?;
        let data: Vec<F> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| F::of(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| F::of(f64::read_le(c))).collect(),
        };
        Tensor::new(shape, data)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}
