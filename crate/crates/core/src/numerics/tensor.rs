//! Dense row-major tensors and the raw kernels the tape differentiates.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumCast};
use rayon::prelude::*;

use super::NumericsError;

/// Serial matmuls below this flop count; threading overhead dominates there.
const PAR_FLOPS: usize = 32_768;

/// Element type for tensors. `f32` is the working precision; `f64` exists
/// for gradient checking, where `f32` rounding would swamp the
/// finite-difference comparison.
pub trait Scalar: Float + Send + Sync + Debug + Sum + 'static {
    /// Dtype tag written into checkpoint headers.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Dense tensor owning a row-major buffer. Rank 0 (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::InvalidShape {
                shape,
                data_len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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

    /// Element at a full multi-index. Panics on a bad index; this is a
    /// convenience for tests and tiny lookups, not a hot path.
    pub fn get(&self, index: &[usize]) -> F {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let strides = strides_of(&self.shape);
        let mut off = 0;
        for (ax, &i) in index.iter().enumerate() {
            assert!(i < self.shape[ax], "index {i} out of bounds on axis {ax}");
            off += i * strides[ax];
        }
        self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NumericsError::InvalidShape {
                shape: shape.to_vec(),
                data_len: self.data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        let c = F::from_f64(factor);
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericsError> {
        binary_broadcast(self, other, "add", |x, y| x + y)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, NumericsError> {
        binary_broadcast(self, other, "sub", |x, y| x - y)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, NumericsError> {
        binary_broadcast(self, other, "mul", |x, y| x * y)
    }

    /// Reorders axes; `perm` must be a permutation of `0..rank`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, NumericsError> {
        let r = self.rank();
        let mut seen = vec![false; r];
        let valid = perm.len() == r
            && perm.iter().all(|&p| {
                if p >= r || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(NumericsError::InvalidPermutation {
                perm: perm.to_vec(),
                rank: r,
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides_of(&self.shape);
        let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let numel = self.numel();
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..numel {
            data.push(self.data[off]);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                off += step[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
                off -= step[ax] * out_shape[ax];
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    /// Swaps the last two axes; rank must be at least 2.
    pub fn transpose_last2(&self) -> Result<Self, NumericsError> {
        let r = self.rank();
        if r < 2 {
            return Err(NumericsError::RankTooLow {
                context: "transpose_last2",
                rank: r,
                min: 2,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn sum_axis(&self, axis: usize, keep: bool) -> Result<Self, NumericsError> {
        let r = self.rank();
        if axis >= r {
            return Err(NumericsError::InvalidAxis { axis, rank: r });
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out_shape = self.shape.clone();
        if keep {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    data[dst + i] = data[dst + i] + self.data[base + i];
                }
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    pub fn sum_all(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> F {
        self.sum_all() / F::from_f64(self.numel() as f64)
    }

    /// Sums a gradient back down to `target` after broadcasting: leading
    /// extra axes are summed away, size-1 target axes are summed keepdim.
    pub(crate) fn reduce_to_shape(&self, target: &[usize]) -> Result<Self, NumericsError> {
        let mut t = self.clone();
        while t.rank() > target.len() {
            t = t.sum_axis(0, false)?;
        }
        for ax in 0..target.len() {
            if t.shape[ax] != target[ax] {
                if target[ax] == 1 {
                    t = t.sum_axis(ax, true)?;
                } else {
                    return Err(NumericsError::ShapeMismatch {
                        context: "reduce_to_shape",
                        lhs: self.shape.clone(),
                        rhs: target.to_vec(),
                    });
                }
            }
        }
        Ok(t)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ad = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let bd = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ad == bd {
            ad
        } else if ad == 1 {
            bd
        } else if bd == 1 {
            ad
        } else {
            return None;
        };
    }
    Some(out)
}

/// Right-aligned strides of `shape` inside a frame of `out_rank` axes,
/// with stride 0 on broadcast (size-1 or missing) axes.
fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let strides = strides_of(shape);
    let mut out = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    for i in 0..shape.len() {
        if shape[i] != 1 {
            out[offset + i] = strides[i];
        }
    }
    out
}

pub(crate) fn binary_broadcast<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    context: &'static str,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>, NumericsError> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let shape =
        broadcast_shapes(&a.shape, &b.shape).ok_or_else(|| NumericsError::ShapeMismatch {
            context,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })?;
    let rank = shape.len();
    let a_step = broadcast_strides(&a.shape, rank);
    let b_step = broadcast_strides(&b.shape, rank);
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for _ in 0..numel {
        data.push(f(a.data[ao], b.data[bo]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ao += a_step[ax];
            bo += b_step[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            ao -= a_step[ax] * shape[ax];
            bo -= b_step[ax] * shape[ax];
        }
    }
    Ok(Tensor { shape, data })
}

/// Batched matrix product. The last two axes multiply as `[m,k] x [k,n]`;
/// leading axes broadcast elementwise. Both operands need rank >= 2.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, NumericsError> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(NumericsError::RankTooLow {
            context: "matmul",
            rank: a.rank().min(b.rank()),
            min: 2,
        });
    }
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (k2, n) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            context: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let a_batch = &a.shape[..a.rank() - 2];
    let b_batch = &b.shape[..b.rank() - 2];
    let batch = broadcast_shapes(a_batch, b_batch).ok_or_else(|| NumericsError::ShapeMismatch {
        context: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let batch_numel: usize = batch.iter().product();

    // Base element offsets of each batch slice in a and b.
    let rank = batch.len();
    let a_step = broadcast_strides(a_batch, rank);
    let b_step = broadcast_strides(b_batch, rank);
    let mut offsets = Vec::with_capacity(batch_numel);
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for _ in 0..batch_numel {
        offsets.push((ao * m * k, bo * k * n));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ao += a_step[ax];
            bo += b_step[ax];
            if idx[ax] < batch[ax] {
                break;
            }
            idx[ax] = 0;
            ao -= a_step[ax] * batch[ax];
            bo -= b_step[ax] * batch[ax];
        }
    }

    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![F::zero(); batch_numel * m * n];
    if n > 0 && m > 0 && batch_numel > 0 {
        let a_data = &a.data;
        let b_data = &b.data;
        let offsets = &offsets;
        let row = |(r, out_row): (usize, &mut [F])| {
            let (a_base, b_base) = offsets[r / m];
            let i = r % m;
            let a_row = &a_data[a_base + i * k..a_base + (i + 1) * k];
            for (kk, &av) in a_row.iter().enumerate() {
                let b_row = &b_data[b_base + kk * n..b_base + kk * n + n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        };
        if batch_numel * m * n * k >= PAR_FLOPS {
            out.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            out.chunks_mut(n).enumerate().for_each(row);
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

/// Numerically stable softmax along `axis`: the lane max is subtracted
/// before exponentiation, so `-inf` mask entries map to exactly zero.
/// Every lane must keep at least one finite entry.
pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>, NumericsError> {
    let r = x.rank();
    if axis >= r {
        return Err(NumericsError::InvalidAxis { axis, rank: r });
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut data = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = F::neg_infinity();
            for j in 0..len {
                mx = mx.max(data[base + j * inner]);
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (data[base + j * inner] - mx).exp();
                data[base + j * inner] = e;
                sum = sum + e;
            }
            for j in 0..len {
                data[base + j * inner] = data[base + j * inner] / sum;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Normalizes each lane of the last axis to zero mean and unit variance
/// (population variance, `eps` inside the square root). A constant lane
/// normalizes to all zeros.
pub(crate) fn normalize_last<F: Scalar>(
    x: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>, NumericsError> {
    let r = x.rank();
    if r < 1 {
        return Err(NumericsError::RankTooLow {
            context: "layer_norm",
            rank: r,
            min: 1,
        });
    }
    let d = x.shape[r - 1];
    debug_assert!(d > 0, "layer_norm over an empty axis");
    let dn = F::from_f64(d as f64);
    let epsf = F::from_f64(eps);
    let mut data = x.data.clone();
    for lane in data.chunks_mut(d) {
        let mean = lane.iter().copied().sum::<F>() / dn;
        let var = lane
            .iter()
            .map(|&v| {
                let c = v - mean;
                c * c
            })
            .sum::<F>()
            / dn;
        let sigma = (var + epsf).sqrt();
        for v in lane.iter_mut() {
            *v = (*v - mean) / sigma;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Layer normalization over the last axis followed by the learned affine
/// map: `gain * xhat + bias`. `gain` and `bias` are vectors of the last
/// axis length. A constant input lane yields exactly `bias`.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>, NumericsError> {
    let r = x.rank();
    if r < 1 {
        return Err(NumericsError::RankTooLow {
            context: "layer_norm",
            rank: r,
            min: 1,
        });
    }
    let d = x.shape[r - 1];
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(NumericsError::ShapeMismatch {
            context: "layer_norm",
            lhs: gain.shape().to_vec(),
            rhs: vec![d],
        });
    }
    let xhat = normalize_last(x, eps)?;
    xhat.mul(gain)?.add(bias)
}
