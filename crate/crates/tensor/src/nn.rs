//! Convolutional building blocks over channel-major `[C, N, H, W]` activations.
//!
//! Keeping channels outermost lets a convolution be a single matrix product
//! `[C_out, C_in*k*k] @ [C_in*k*k, N*H*W]` whose result is already laid out
//! as the next activation.

use crate::{ConvGeom, Scalar, Var};

fn dims4(x: &Var<impl Scalar>, what: &str) -> [usize; 4] {
    match *x.shape() {
        [c, n, h, w] => [c, n, h, w],
        ref s => panic!("{what}: expected [C, N, H, W], got {s:?}"),
    }
}

/// 2-D convolution; `weight` is `[C_out, C_in, k, k]`, `bias` is `[C_out]`.
pub fn conv2d<T: Scalar>(x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>, stride: usize, pad: usize) -> Var<T> {
    let [c, n, h, w] = dims4(x, "conv2d");
    let [c_out, c_in, k, k2] = dims4(weight, "conv2d weight");
    assert!(c_in == c && k == k2, "conv2d: weight {:?} vs input {:?}", weight.shape(), x.shape());
    let geom = ConvGeom {
        channels: c,
        batch: n,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
    };
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let cols = if k == 1 && stride == 1 && pad == 0 {
        x.reshape(&[c, n * h * w])
    } else {
        x.im2col(&geom)
    };
    let mut y = weight.reshape(&[c_out, c * k * k]).matmul(&cols);
    if let Some(b) = bias {
        y = y.add_b(&b.reshape(&[c_out, 1]));
    }
    y.reshape(&[c_out, n, ho, wo])
}

/// Transposed convolution without padding; `weight` is `[C_in, C_out, k, k]`.
/// Output size is `(H - 1) * stride + k`.
pub fn conv_transpose2d<T: Scalar>(x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>, stride: usize) -> Var<T> {
    let [c, n, h, w] = dims4(x, "conv_transpose2d");
    let [c_in, c_out, k, k2] = dims4(weight, "conv_transpose2d weight");
    assert!(c_in == c && k == k2, "conv_transpose2d: weight {:?} vs input {:?}", weight.shape(), x.shape());
    let geom = ConvGeom {
        channels: c_out,
        batch: n,
        height: (h - 1) * stride + k,
        width: (w - 1) * stride + k,
        kernel: k,
        stride,
        pad: 0,
    };
    let cols = weight
        .reshape(&[c, c_out * k * k])
        .matmul_t(&x.reshape(&[c, n * h * w]), true, false);
    let mut y = cols.col2im(&geom);
    if let Some(b) = bias {
        y = y.add_b(&b.reshape(&[c_out, 1, 1, 1]));
    }
    y
}

/// Group normalization with per-sample statistics and per-channel affine.
pub fn group_norm<T: Scalar>(x: &Var<T>, groups: usize, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Var<T> {
    let [c, n, h, w] = dims4(x, "group_norm");
    assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
    let per = c / groups;
    let grouped = x.reshape(&[groups, per, n, h * w]);
    let stat_shape = [groups, 1, n, 1];
    let inv_count = T::one() / T::lit((per * h * w) as f64);
    let mean = grouped.sum_to(&stat_shape).scale(inv_count);
    let centered = grouped.sub_b(&mean);
    let var = centered.square().sum_to(&stat_shape).scale(inv_count);
    let std = var.add_scalar(eps).sqrt();
    let normed = centered.div_b(&std).reshape(&[c, n, h, w]);
    normed
        .mul_b(&gamma.reshape(&[c, 1, 1, 1]))
        .add_b(&beta.reshape(&[c, 1, 1, 1]))
}

/// Spatial mean, `[C, N, H, W] -> [C, N]`.
pub fn global_avg_pool<T: Scalar>(x: &Var<T>) -> Var<T> {
    let [c, n, h, w] = dims4(x, "global_avg_pool");
    x.sum_to(&[c, n, 1, 1])
        .scale(T::one() / T::lit((h * w) as f64))
        .reshape(&[c, n])
}

/// `[N, C, H, W] <-> [C, N, H, W]`; the permutation is its own inverse.
pub fn swap_batch_channel<T: Scalar>(x: &Var<T>) -> Var<T> {
    dims4(x, "swap_batch_channel");
    x.permute(&[1, 0, 2, 3])
}
