//! Single-channel raster types shared by the label, metric and I/O code.

use crate::error::{Error, Result};

/// Ground-truth glass mask, one byte per pixel, 1 = glass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "mask must be non-empty, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "BinaryMask::new",
                expected: vec![height, width],
                actual: vec![data.len()],
            });
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_float(&self) -> FloatMap {
        FloatMap {
            height: self.height,
            width: self.width,
            values: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }
}

/// Real-valued H×W raster (distance maps, soft labels, predictions).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl FloatMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "map must be non-empty, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "FloatMap::new",
                expected: vec![height, width],
                actual: vec![values.len()],
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.width) {
            row.reverse();
        }
        Self { values, ..*self }
    }

    pub(crate) fn same_shape(&self, other: (usize, usize), op: &'static str) -> Result<()> {
        if (self.height, self.width) != other {
            return Err(Error::ShapeMismatch {
                op,
                expected: vec![other.0, other.1],
                actual: vec![self.height, self.width],
            });
        }
        Ok(())
    }
}

/// Distances in pixel units; see [`crate::labelkit::euclidean_distance_transform`].
pub type DistanceMap = FloatMap;

/// Predicted glass probability per pixel, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap(FloatMap);

impl PredictionMap {
    pub fn new(map: FloatMap) -> Result<Self> {
        if let Some(v) = map
            .values()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::invalid(format!("prediction value {v} outside [0,1]")));
        }
        Ok(Self(map))
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(FloatMap::new(height, width, values)?)
    }

    pub fn map(&self) -> &FloatMap {
        &self.0
    }

    pub fn values(&self) -> &[f32] {
        self.0.values()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
        assert!(BinaryMask::new(0, 2, vec![]).is_err());
        assert!(BinaryMask::new(2, 2, vec![0, 1, 1]).is_err());
    }

    #[test]
    fn prediction_range_checked() {
        assert!(PredictionMap::from_values(1, 2, vec![0.0, 1.0]).is_ok());
        assert!(PredictionMap::from_values(1, 2, vec![0.0, 1.5]).is_err());
        assert!(PredictionMap::from_values(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let m = BinaryMask::from_fn(3, 4, |y, x| (x + y) % 3 == 0).unwrap();
        assert_ne!(m.flip_horizontal(), m);
        assert_eq!(m.flip_horizontal().flip_horizontal(), m);
    }
}
