//! Binary morphology with disk structuring elements.
//!
//! Dilation reads pixels outside the grid as 0 and erosion reads them as 1, so
//! constant masks are fixed points and `erode(m) == !dilate(!m)` exactly.

use crate::image::{BinaryMask, SoftMask};

/// Offsets `(dy, dx)` with `dy^2 + dx^2 <= r^2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiskStrel {
    radius: usize,
    offsets: Vec<(i64, i64)>,
}

impl DiskStrel {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn offsets(&self) -> &[(i64, i64)] {
        &self.offsets
    }

    /// Half-width of the disk on row `dy`.
    fn half_width(&self, dy: i64) -> i64 {
        let r = self.radius as i64;
        let mut hw = 0;
        while (hw + 1) * (hw + 1) + dy * dy <= r * r {
            hw += 1;
        }
        hw
    }
}

pub fn disk_strel(r: usize) -> DiskStrel {
    let ri = r as i64;
    let mut offsets = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if dy * dy + dx * dx <= ri * ri {
                offsets.push((dy, dx));
            }
        }
    }
    DiskStrel { radius: r, offsets }
}

/// `out(p) = 1` iff some disk neighbour of `p` is set.
///
/// The disk is split into horizontal runs and each run is answered with a row
/// prefix sum, so the cost is `O(H * W * r)` rather than `O(H * W * r^2)`.
pub fn dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    if r == 0 {
        return m.clone();
    }
    let (h, w) = m.hw();
    let strel = disk_strel(r);
    let mut prefix = vec![0u32; h * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            prefix[y * (w + 1) + x + 1] = prefix[y * (w + 1) + x] + m.data()[y * w + x] as u32;
        }
    }
    let runs: Vec<(i64, i64)> = (-(r as i64)..=r as i64).map(|dy| (dy, strel.half_width(dy))).collect();
    BinaryMask::from_fn(h, w, |y, x| {
        runs.iter().any(|&(dy, hw)| {
            let yy = y as i64 + dy;
            if yy < 0 || yy >= h as i64 {
                return false;
            }
            let lo = (x as i64 - hw).max(0) as usize;
            let hi = (x as i64 + hw + 1).min(w as i64) as usize;
            let row = &prefix[yy as usize * (w + 1)..];
            row[hi] > row[lo]
        })
    })
}

pub fn erode(m: &BinaryMask, r: usize) -> BinaryMask {
    dilate(&m.complement(), r).complement()
}

/// Band of width `r` on either side of the mask boundary: `dilate - erode` of
/// the mask binarized at 0.5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMap(BinaryMask);

impl WeightMap {
    pub fn mask(&self) -> &BinaryMask {
        &self.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.to_f32()
    }
}

pub fn boundary_weight_map(m: &SoftMask, r: usize) -> WeightMap {
    boundary_band(&m.binarize(0.5), r)
}

pub fn boundary_band(b: &BinaryMask, r: usize) -> WeightMap {
    let d = dilate(b, r);
    let e = erode(b, r);
    let data = d.data().iter().zip(e.data()).map(|(a, b)| a - b).collect();
    WeightMap(BinaryMask::new(b.height(), b.width(), data).expect("erosion is contained in dilation"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cross5() -> BinaryMask {
        BinaryMask::from_fn(5, 5, |y, x| (y == 2 && (1..=3).contains(&x)) || (x == 2 && (1..=3).contains(&y)))
    }

    #[test]
    fn strel_sizes() {
        assert_eq!(disk_strel(0).offsets(), &[(0, 0)]);
        let mut r1 = disk_strel(1).offsets().to_vec();
        r1.sort();
        assert_eq!(r1, vec![(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)]);
        assert_eq!(disk_strel(2).offsets().len(), 13);
    }

    #[test]
    fn dilate_and_erode_examples() {
        assert_eq!(dilate(&BinaryMask::zeros(5, 5), 3), BinaryMask::zeros(5, 5));
        let dot = BinaryMask::from_fn(5, 5, |y, x| y == 2 && x == 2);
        assert_eq!(dilate(&dot, 1), cross5());
        assert_eq!(erode(&BinaryMask::ones(5, 5), 2), BinaryMask::ones(5, 5));
        assert_eq!(erode(&cross5(), 1), dot);
        assert_eq!(dilate(&cross5(), 0), cross5());
        assert_eq!(erode(&cross5(), 0), cross5());
    }

    #[test]
    fn weight_map_examples() {
        let ones = SoftMask::from(&BinaryMask::ones(6, 6));
        assert_eq!(boundary_weight_map(&ones, 2).mask().count(), 0);
        let zeros = SoftMask::from(&BinaryMask::zeros(6, 6));
        assert_eq!(boundary_weight_map(&zeros, 2).mask().count(), 0);
        let dot = SoftMask::from(&BinaryMask::from_fn(5, 5, |y, x| y == 2 && x == 2));
        assert_eq!(boundary_weight_map(&dot, 1).mask(), &cross5());
        // half plane: columns 0..4 set; band covers columns 3 and 4
        let half = SoftMask::from(&BinaryMask::from_fn(8, 8, |_, x| x < 4));
        let band = boundary_weight_map(&half, 1);
        assert_eq!(band.mask(), &BinaryMask::from_fn(8, 8, |_, x| x == 3 || x == 4));
        assert_eq!(boundary_weight_map(&half, 0).mask().count(), 0);
    }
}
