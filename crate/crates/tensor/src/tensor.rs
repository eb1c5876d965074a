use std::fmt;

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ..")?;
        }
        write!(f, "]")
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Geometry of a 2-D convolution over a `[C, N, H, W]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.channels, self.batch, self.height, self.width]
    }

    pub fn cols_shape(&self) -> Vec<usize> {
        vec![
            self.channels * self.kernel * self.kernel,
            self.batch * self.out_height() * self.out_width(),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv",
                reason: "kernel and stride must be positive".into(),
            });
        }
        if self.height + 2 * self.pad < self.kernel || self.width + 2 * self.pad < self.kernel {
            return Err(TensorError::Invalid {
                op: "conv",
                reason: format!(
                    "kernel {} larger than padded input {}x{}",
                    self.kernel, self.height, self.width
                ),
            });
        }
        Ok(())
    }
}

/// Output columns `ox` in `0..wo` whose input column `ox * s + off` lies in `0..w`.
fn valid_cols(off: isize, s: isize, w: isize, wo: usize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = if w - 1 - off < 0 { 0 } else { (w - 1 - off) / s + 1 };
    let (lo, hi) = (lo as usize, (hi as usize).min(wo));
    (lo, hi.max(lo))
}

/// Sparse linear resampling between two spatial grids.
///
/// Each entry adds `weight * src[src_index]` into `dst[dst_index]`; the map is
/// applied independently to every leading plane of a `[.., H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap<T> {
    pub src_hw: (usize, usize),
    pub dst_hw: (usize, usize),
    pub entries: Vec<(u32, u32, T)>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = numel_of(&shape);
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel_of(&shape)).map(&mut f).collect();
        Self { shape, data }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn check_broadcast(&self, op: &'static str, target: &[usize]) -> Result<()> {
        let ok = self.shape.len() == target.len()
            && self
                .shape
                .iter()
                .zip(target)
                .all(|(&s, &t)| s == t || s == 1);
        if ok {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            })
        }
    }

    /// Replicates size-1 axes up to `shape` (ranks must agree).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.rank() == 0 {
            return Ok(Self::full(shape.to_vec(), self.data[0]));
        }
        self.check_broadcast("broadcast_to", shape)?;
        if self.shape == shape {
            return Ok(self.clone());
        }
        let rank = shape.len();
        let src_strides: Vec<usize> = strides_of(&self.shape)
            .into_iter()
            .zip(&self.shape)
            .map(|(st, &s)| if s == 1 { 0 } else { st })
            .collect();
        let inner = shape[rank - 1];
        let inner_stride = src_strides[rank - 1];
        let outer = numel_of(shape) / inner.max(1);
        let mut out = Vec::with_capacity(numel_of(shape));
        let mut idx = vec![0usize; rank - 1];
        for _ in 0..outer {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            if inner_stride == 0 {
                out.extend(std::iter::repeat_n(self.data[off], inner));
            } else {
                out.extend_from_slice(&self.data[off..off + inner]);
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: out,
        })
    }

    /// Sums over axes where `shape` has size 1; adjoint of [`Self::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() {
            return Ok(Self::scalar(self.sum()));
        }
        let target = Tensor::<T>::zeros(shape.to_vec());
        target.check_broadcast("sum_to", &self.shape)?;
        if self.shape == shape {
            return Ok(self.clone());
        }
        let rank = shape.len();
        let dst_strides: Vec<usize> = strides_of(shape)
            .into_iter()
            .zip(shape)
            .map(|(st, &s)| if s == 1 { 0 } else { st })
            .collect();
        let inner = self.shape[rank - 1];
        let inner_stride = dst_strides[rank - 1];
        let outer = self.data.len() / inner.max(1);
        let mut out = vec![T::zero(); numel_of(shape)];
        let mut idx = vec![0usize; rank - 1];
        for row in 0..outer {
            let off: usize = idx.iter().zip(&dst_strides).map(|(i, s)| i * s).sum();
            let src = &self.data[row * inner..(row + 1) * inner];
            if inner_stride == 0 {
                out[off] += src.iter().copied().sum::<T>();
            } else {
                for (o, &s) in out[off..off + inner].iter_mut().zip(src) {
                    *o += s;
                }
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: out,
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let src_strides = strides_of(&self.shape);
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self { shape, data: out })
    }

    /// `op(a) @ op(b)` for rank-2 operands, where `op` optionally transposes.
    pub fn matmul(a: &Self, b: &Self, trans_a: bool, trans_b: bool) -> Result<Self> {
        if a.rank() != 2 || b.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k) = if trans_a {
            (a.shape[1], a.shape[0])
        } else {
            (a.shape[0], a.shape[1])
        };
        let (kb, n) = if trans_b {
            (b.shape[1], b.shape[0])
        } else {
            (b.shape[0], b.shape[1])
        };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        if m > 0 && n > 0 && k > 0 {
            let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            // SAFETY: strides describe the row-major storage of `a`, `b` and `out`.
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    a.data.as_ptr(),
                    rsa,
                    csa,
                    b.data.as_ptr(),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Unfolds `[C, N, H, W]` patches into `[C*k*k, N*Ho*Wo]` columns.
    pub fn im2col(&self, g: &ConvGeom) -> Result<Self> {
        g.validate()?;
        if self.shape != g.image_shape() {
            return Err(TensorError::ShapeMismatch {
                op: "im2col",
                lhs: self.shape.clone(),
                rhs: g.image_shape(),
            });
        }
        let (ho, wo) = (g.out_height(), g.out_width());
        let (h, w, k, s) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize);
        let pad = g.pad as isize;
        let ncols = g.batch * ho * wo;
        let mut out = vec![T::zero(); g.channels * k * k * ncols];
        for c in 0..g.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst_row = &mut out[row * ncols..(row + 1) * ncols];
                    for n in 0..g.batch {
                        let plane = &self.data[(c * g.batch + n) * g.height * g.width..][..g.height * g.width];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let src_row = &plane[iy as usize * g.width..][..g.width];
                            let dst = &mut dst_row[(n * ho + oy) * wo..][..wo];
                            let (lo, hi) = valid_cols(kx as isize - pad, s, w, wo);
                            let off = kx as isize - pad;
                            if s == 1 {
                                let start = (lo as isize + off) as usize;
                                dst[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                            } else {
                                for ox in lo..hi {
                                    dst[ox] = src_row[(ox as isize * s + off) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            shape: g.cols_shape(),
            data: out,
        })
    }

    /// Folds columns back into an image, summing overlaps; adjoint of [`Self::im2col`].
    pub fn col2im(&self, g: &ConvGeom) -> Result<Self> {
        g.validate()?;
        if self.shape != g.cols_shape() {
            return Err(TensorError::ShapeMismatch {
                op: "col2im",
                lhs: self.shape.clone(),
                rhs: g.cols_shape(),
            });
        }
        let (ho, wo) = (g.out_height(), g.out_width());
        let (h, w, k, s) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize);
        let pad = g.pad as isize;
        let ncols = g.batch * ho * wo;
        let mut out = vec![T::zero(); g.channels * g.batch * g.height * g.width];
        for c in 0..g.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src_row = &self.data[row * ncols..(row + 1) * ncols];
                    for n in 0..g.batch {
                        let plane =
                            &mut out[(c * g.batch + n) * g.height * g.width..][..g.height * g.width];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let dst_row = &mut plane[iy as usize * g.width..][..g.width];
                            let src = &src_row[(n * ho + oy) * wo..][..wo];
                            let (lo, hi) = valid_cols(kx as isize - pad, s, w, wo);
                            let off = kx as isize - pad;
                            if s == 1 {
                                let start = (lo as isize + off) as usize;
                                for (d, &v) in dst_row[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                    *d += v;
                                }
                            } else {
                                for ox in lo..hi {
                                    dst_row[(ox as isize * s + off) as usize] += src[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            shape: g.image_shape(),
            data: out,
        })
    }

    /// Concatenates along the leading axis.
    pub fn concat0(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        for p in parts {
            if p.rank() == 0 || &p.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Self { shape, data })
    }

    /// Slice `[start, start+len)` of the leading axis.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Self> {
        if self.rank() == 0 || start + len > self.shape[0] {
            return Err(TensorError::Invalid {
                op: "narrow",
                reason: format!("range {start}..{} outside {:?}", start + len, self.shape),
            });
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * row..(start + len) * row].to_vec(),
        })
    }

    /// Embeds this tensor at `start` of a zero tensor with `total` leading rows.
    pub fn pad0(&self, start: usize, total: usize) -> Result<Self> {
        if self.rank() == 0 || start + self.shape[0] > total {
            return Err(TensorError::Invalid {
                op: "pad",
                reason: format!("{:?} at {start} does not fit in {total}", self.shape),
            });
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = total;
        let mut data = vec![T::zero(); total * row];
        data[start * row..start * row + self.data.len()].copy_from_slice(&self.data);
        Ok(Self { shape, data })
    }

    /// Applies `map` (or its transpose) to every trailing `[H, W]` plane.
    pub fn spatial_map(&self, map: &SpatialMap<T>, transpose: bool) -> Result<Self> {
        let (src_hw, dst_hw) = if transpose {
            (map.dst_hw, map.src_hw)
        } else {
            (map.src_hw, map.dst_hw)
        };
        let r = self.rank();
        if r < 2 || (self.shape[r - 2], self.shape[r - 1]) != src_hw {
            return Err(TensorError::ShapeMismatch {
                op: "spatial_map",
                lhs: self.shape.clone(),
                rhs: vec![src_hw.0, src_hw.1],
            });
        }
        let src_plane = src_hw.0 * src_hw.1;
        let dst_plane = dst_hw.0 * dst_hw.1;
        let planes = self.data.len() / src_plane.max(1);
        let mut out = vec![T::zero(); planes * dst_plane];
        for p in 0..planes {
            let src = &self.data[p * src_plane..(p + 1) * src_plane];
            let dst = &mut out[p * dst_plane..(p + 1) * dst_plane];
            for &(d, s, w) in &map.entries {
                let (d, s) = if transpose { (s, d) } else { (d, s) };
                dst[d as usize] += w * src[s as usize];
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = dst_hw.0;
        shape[r - 1] = dst_hw.1;
        Ok(Self { shape, data: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_wrong_count() {
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 2], vec![1.0]),
            Err(TensorError::ElementCount { .. })
        ));
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint_shapes() {
        let a = t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = a.broadcast_to(&[2, 2, 3]).unwrap();
        assert_eq!(b.data(), &[1., 2., 3., 1., 2., 3., 4., 5., 6., 4., 5., 6.]);
        let s = b.sum_to(&[2, 1, 3]).unwrap();
        assert_eq!(s.data(), &[2., 4., 6., 8., 10., 12.]);
        let s = b.sum_to(&[1, 1, 1]).unwrap();
        assert_eq!(s.item(), 42.0);
        let col = t(&[2, 1], &[1., 2.]).broadcast_to(&[2, 3]).unwrap();
        assert_eq!(col.data(), &[1., 1., 1., 2., 2., 2.]);
        assert!(a.broadcast_to(&[3, 2, 3]).is_err());
    }

    #[test]
    fn matmul_transposes() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        let c = Tensor::matmul(&a, &b, false, false).unwrap();
        assert_eq!(c.data(), &[4., 5., 10., 11.]);
        let at = a.permute(&[1, 0]).unwrap();
        let c2 = Tensor::matmul(&at, &b, true, false).unwrap();
        assert_eq!(c, c2);
        let bt = b.permute(&[1, 0]).unwrap();
        let c3 = Tensor::matmul(&a, &bt, false, true).unwrap();
        assert_eq!(c, c3);
        assert!(Tensor::matmul(&a, &a, false, false).is_err());
    }

    #[test]
    fn im2col_identity_kernel() {
        let x = Tensor::<f64>::from_fn(vec![1, 1, 3, 3], |i| i as f64);
        let g = ConvGeom {
            channels: 1,
            batch: 1,
            height: 3,
            width: 3,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let cols = x.im2col(&g).unwrap();
        assert_eq!(cols.shape(), &[9, 9]);
        // centre tap reproduces the image
        assert_eq!(&cols.data()[4 * 9..5 * 9], x.data());
        // top-left tap at output (0,0) reads padding
        assert_eq!(cols.data()[0], 0.0);
        assert_eq!(cols.data()[4], 0.0);
        assert_eq!(cols.data()[8], 4.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            batch: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = Tensor::<f64>::from_fn(g.image_shape(), |i| ((i * 7) % 11) as f64 - 5.0);
        let y = Tensor::<f64>::from_fn(g.cols_shape(), |i| ((i * 5) % 13) as f64 - 6.0);
        let lhs: f64 = x.im2col(&g).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(y.col2im(&g).unwrap().data()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn concat_narrow_pad() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        let c = Tensor::concat0(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.narrow0(1, 2).unwrap(), b);
        assert_eq!(a.pad0(1, 3).unwrap().data(), &[0., 0., 1., 2., 0., 0.]);
        assert!(c.narrow0(2, 2).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.permute(&[1, 2, 0]).unwrap(), x);
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn spatial_map_transpose_is_adjoint() {
        let map = SpatialMap {
            src_hw: (2, 2),
            dst_hw: (3, 1),
            entries: vec![(0, 1, 0.5), (0, 2, 0.5), (2, 3, 2.0)],
        };
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let y = x.spatial_map(&map, false).unwrap();
        assert_eq!(y.data(), &[2.5, 0.0, 8.0]);
        let back = y.spatial_map(&map, true).unwrap();
        assert_eq!(back.shape(), &[1, 2, 2]);
        assert_eq!(back.data(), &[0.0, 1.25, 1.25, 16.0]);
    }
}
