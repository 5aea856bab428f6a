use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result};

/// Channel-major `channels x height x width` array.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

/// Single-precision raster; the interchange type between the diffusion
/// process, the denoisers and the codecs.
pub type Raster = FeatureMap<f32>;

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        FeatureMap { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(FeatureMap { channels, height, width, data })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// RGB histopathology-style image with intensities in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster(Raster);

impl ImageRaster {
    pub fn new(raster: Raster) -> Result<Self> {
        if raster.channels != 3 {
            return Err(Error::shape(format!("image needs 3 channels, got {}", raster.channels)));
        }
        if let Some(v) = raster.data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("image intensity {v} outside [-1, 1]")));
        }
        Ok(ImageRaster(raster))
    }

    /// Clamps every value into `[-1, 1]` instead of rejecting.
    pub fn clamped(mut raster: Raster) -> Result<Self> {
        for v in &mut raster.data {
            *v = v.clamp(-1.0, 1.0);
        }
        Self::new(raster)
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }

    /// Copies the `size x size` window with top-left corner `(row, col)`.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> ImageRaster {
        let src = &self.0;
        let mut out = Raster::zeros(3, height, width);
        for c in 0..3 {
            for y in 0..height {
                let s = (c * src.height + row + y) * src.width + col;
                let d = (c * height + y) * width;
                out.data[d..d + width].copy_from_slice(&src.data[s..s + width]);
            }
        }
        ImageRaster(out)
    }
}

/// Per-pixel nucleus ids, `0` is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl InstanceMap {
    pub fn empty(height: usize, width: usize) -> Self {
        InstanceMap { height, width, labels: vec![0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!("{} labels for a {height}x{width} map", labels.len())));
        }
        Ok(InstanceMap { height, width, labels })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Number of distinct non-zero ids.
    pub fn count(&self) -> usize {
        let mut seen: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    pub fn max_id(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Renumbers ids to `1..=N` in order of each id's first pixel in raster
    /// scan order.
    pub fn canonicalize(&self) -> InstanceMap {
        let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    let next = remap.len() as u32 + 1;
                    *remap.entry(l).or_insert(next)
                }
            })
            .collect();
        InstanceMap { height: self.height, width: self.width, labels }
    }

    pub fn is_canonical(&self) -> bool {
        *self == self.canonicalize()
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> InstanceMap {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let s = (row + y) * self.width + col;
            labels.extend_from_slice(&self.labels[s..s + width]);
        }
        InstanceMap { height, width, labels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonicalize_orders_by_first_pixel() {
        let m = InstanceMap::from_vec(2, 3, vec![0, 7, 7, 3, 0, 9]).unwrap();
        let c = m.canonicalize();
        assert_eq!(c.labels, vec![0, 1, 1, 2, 0, 3]);
        assert!(c.is_canonical());
        assert_eq!(c.count(), 3);
    }

    #[test]
    fn image_rejects_out_of_range() {
        let r = Raster::filled(3, 2, 2, 1.5);
        assert!(ImageRaster::new(r.clone()).is_err());
        assert!(ImageRaster::clamped(r).is_ok());
        assert!(ImageRaster::new(Raster::zeros(4, 2, 2)).is_err());
    }
}
