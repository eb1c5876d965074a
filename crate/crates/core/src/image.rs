//! Images and masks.
//!
//! Images are stored channel-planar (`C` planes of `H * W` values) because that
//! is the layout the networks consume.

use crate::error::{invalid, Result};

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

fn check_grow(op: &'static str, from: (usize, usize), to: (usize, usize)) -> Result<()> {
    if to.0 < from.0 || to.1 < from.1 {
        return Err(invalid(op, format!("cannot shrink {from:?} to {to:?}")));
    }
    Ok(())
}

/// `H x W x C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid("image", format!("empty image {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(invalid(
                "image",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid("image", format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds an image from `f(channel, y, x)`; values are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Channel-planar values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Multiplies every channel by a per-pixel weight in `[0, 1]`.
    pub fn masked(&self, weights: &[f32]) -> Result<Self> {
        let n = self.height * self.width;
        if weights.len() != n {
            return Err(invalid("masked", format!("mask has {} pixels, image {n}", weights.len())));
        }
        let data = self
            .data
            .chunks(n)
            .flat_map(|plane| plane.iter().zip(weights).map(|(v, w)| v * w))
            .collect();
        Ok(Self { data, ..self.clone() })
    }

    /// Applies `f` to every value and clamps the result back into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Grows the image to `height x width` by mirroring the bottom and right
    /// edges.
    pub fn pad_reflect(&self, height: usize, width: usize) -> Result<Self> {
        check_grow("pad_reflect", self.hw(), (height, width))?;
        Ok(Self::from_fn(height, width, self.channels, |c, y, x| {
            self.get(c, reflect(y, self.height), reflect(x, self.width))
        }))
    }

    pub(crate) fn from_planar_unchecked(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }
}

/// Binary `H x W` mask; every element is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid("mask", format!("{height}x{width} needs {} values, got {}", height * width, data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(invalid("mask", format!("value {v} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    /// Rejects anything that is not exactly 0 or 1.
    pub fn from_f32(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        let data = values
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                _ => Err(invalid("mask", format!("value {v} is not binary"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| 1 - v).collect(),
            ..self.clone()
        }
    }

    /// Mask counterpart of [`Image::pad_reflect`].
    pub fn pad_reflect(&self, height: usize, width: usize) -> Result<Self> {
        check_grow("pad_reflect", self.hw(), (height, width))?;
        Ok(Self::from_fn(height, width, |y, x| {
            self.get(reflect(y, self.height), reflect(x, self.width))
        }))
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.hw() == other.hw() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Predicted mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid("soft mask", format!("{height}x{width} needs {} values, got {}", height * width, data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid("soft mask", format!("value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Pixels with value `>= threshold` become 1.
    pub fn binarize(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v >= threshold) as u8).collect(),
        }
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        check_grow("crop", (height, width), self.hw())?;
        let data = (0..height)
            .flat_map(|y| self.data[y * self.width..y * self.width + width].iter().copied())
            .collect();
        Ok(Self { height, width, data })
    }
}

impl From<&BinaryMask> for SoftMask {
    fn from(m: &BinaryMask) -> Self {
        Self {
            height: m.height,
            width: m.width,
            data: m.to_f32(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_padding_then_crop() {
        let img = Image::from_fn(2, 3, 1, |_, y, x| (y * 3 + x) as f32 / 10.0);
        let p = img.pad_reflect(4, 5).unwrap();
        let row = |y: usize| (0..5).map(|x| p.get(0, y, x)).collect::<Vec<_>>();
        assert_eq!(row(0), vec![0.0, 0.1, 0.2, 0.1, 0.0]);
        assert_eq!(row(2), row(0));
        assert_eq!(row(3), row(1));
        assert!(img.pad_reflect(1, 3).is_err());

        let m = BinaryMask::from_fn(1, 1, |_, _| true);
        assert_eq!(m.pad_reflect(2, 2).unwrap().count(), 4);

        let soft = SoftMask::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(soft.crop(1, 2).unwrap().data(), &[0.1, 0.2]);
        assert!(soft.crop(3, 1).is_err());
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5]).is_err());
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
        assert!(BinaryMask::from_f32(1, 2, &[0.0, 0.5]).is_err());
        assert_eq!(BinaryMask::from_f32(1, 2, &[0.0, 1.0]).unwrap().count(), 1);
    }

    #[test]
    fn masked_multiplies_every_channel() {
        let img = Image::from_fn(2, 2, 3, |c, y, x| 0.1 * (c + y + x) as f32);
        let w = [1.0, 0.0, 0.5, 1.0];
        let out = img.masked(&w).unwrap();
        for c in 0..3 {
            for (i, wv) in w.iter().enumerate() {
                assert_eq!(out.plane(c)[i], img.plane(c)[i] * wv);
            }
        }
    }

    #[test]
    fn binarize_threshold_inclusive() {
        let m = SoftMask::new(1, 3, vec![0.49, 0.5, 0.9]).unwrap();
        assert_eq!(m.binarize(0.5).data(), &[0, 1, 1]);
    }
}
