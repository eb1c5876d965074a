//! Packing images and masks into channel-major `[C, N, H, W]` tensors.

use refnet_tensor::{Scalar, Tensor};

use crate::error::{invalid, Result};
use crate::image::{BinaryMask, Image, SoftMask};

fn check_same<'a>(op: &'static str, mut dims: impl Iterator<Item = (usize, usize, usize)>) -> Result<(usize, usize, usize)> {
    let first = dims.next().ok_or_else(|| invalid(op, "empty batch"))?;
    if let Some(other) = dims.find(|d| *d != first) {
        return Err(invalid(op, format!("mixed sizes {first:?} and {other:?}")));
    }
    Ok(first)
}

pub fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let (c, h, w) = check_same("images_to_tensor", images.iter().map(|i| (i.channels(), i.height(), i.width())))?;
    let n = images.len();
    let plane = h * w;
    let mut data = vec![T::zero(); c * n * plane];
    for (j, img) in images.iter().enumerate() {
        for ch in 0..c {
            let dst = &mut data[(ch * n + j) * plane..(ch * n + j + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(img.plane(ch)) {
                *d = T::lit(s as f64);
            }
        }
    }
    Ok(Tensor::new(vec![c, n, h, w], data)?)
}

fn planes_to_tensor<T: Scalar>(n: usize, h: usize, w: usize, planes: impl Iterator<Item = Vec<f32>>) -> Result<Tensor<T>> {
    let data: Vec<T> = planes.flatten().map(|v| T::lit(v as f64)).collect();
    Ok(Tensor::new(vec![1, n, h, w], data)?)
}

pub fn masks_to_tensor<T: Scalar>(masks: &[&BinaryMask]) -> Result<Tensor<T>> {
    let (_, h, w) = check_same("masks_to_tensor", masks.iter().map(|m| (1, m.height(), m.width())))?;
    planes_to_tensor(masks.len(), h, w, masks.iter().map(|m| m.to_f32()))
}

pub fn soft_to_tensor<T: Scalar>(masks: &[&SoftMask]) -> Result<Tensor<T>> {
    let (_, h, w) = check_same("soft_to_tensor", masks.iter().map(|m| (1, m.height(), m.width())))?;
    planes_to_tensor(masks.len(), h, w, masks.iter().map(|m| m.data().to_vec()))
}

/// Splits a `[1, N, H, W]` tensor of probabilities into soft masks.
pub fn tensor_to_soft_masks<T: Scalar>(t: &Tensor<T>) -> Result<Vec<SoftMask>> {
    let [1, n, h, w] = *t.shape() else {
        return Err(invalid("tensor_to_soft_masks", format!("expected [1, N, H, W], got {:?}", t.shape())));
    };
    t.data()
        .chunks(h * w)
        .take(n)
        .map(|c| SoftMask::new(h, w, c.iter().map(|v| v.as_f64() as f32).collect()))
        .collect()
}

/// Per-sample `[C, H, W]` slices of a `[C, N, H, W]` tensor as images, clamped.
pub fn tensor_to_images<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Image>> {
    let [c, n, h, w] = *t.shape() else {
        return Err(invalid("tensor_to_images", format!("expected [C, N, H, W], got {:?}", t.shape())));
    };
    let plane = h * w;
    Ok((0..n)
        .map(|j| {
            let data = (0..c)
                .flat_map(|ch| t.data()[(ch * n + j) * plane..(ch * n + j + 1) * plane].iter())
                .map(|v| (v.as_f64() as f32).clamp(0.0, 1.0))
                .collect();
            Image::from_planar_unchecked(h, w, c, data)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_round_trip() {
        let a = Image::from_fn(2, 3, 3, |c, y, x| (c + y + x) as f32 / 8.0);
        let b = Image::from_fn(2, 3, 3, |c, y, x| (c * y + x) as f32 / 8.0);
        let t = images_to_tensor::<f32>(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2, 3]);
        assert_eq!(tensor_to_images(&t).unwrap(), vec![a, b]);
    }

    #[test]
    fn mixed_sizes_rejected() {
        let a = Image::zeros(2, 2, 3);
        let b = Image::zeros(2, 3, 3);
        assert!(images_to_tensor::<f32>(&[&a, &b]).is_err());
    }
}
