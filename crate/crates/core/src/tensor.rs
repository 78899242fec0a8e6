//! Dense containers: a channel-major `Tensor` for images and feature maps,
//! and a single-plane `Map` for probability and label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major `C×H×W` array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(channel, row, col)` at every element.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    /// Extracts one channel as a map.
    pub fn channel_map(&self, c: usize) -> Map<f64> {
        Map {
            height: self.height,
            width: self.width,
            data: self.plane(c).to_vec(),
        }
    }

    /// Per-pixel mean over channels.
    pub fn channel_mean(&self) -> Map<f64> {
        let n = self.plane_len();
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let k = self.channels.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= k);
        Map {
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Tensor {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut out = Tensor::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let src = self.index(c, top + y, left);
                let dst = out.index(c, y, 0);
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<Map<f64>> for Tensor {
    fn from(map: Map<f64>) -> Self {
        Tensor {
            channels: 1,
            height: map.height,
            width: map.width,
            data: map.data,
        }
    }
}

/// Single-plane `H×W` map, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Map<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

/// Per-pixel probabilities in `[0, 1]`.
pub type ProbMap = Map<f64>;
/// Binary label map (vessel truth, field of view, thresholded prediction).
pub type BinaryMap = Map<bool>;

impl<T: Clone> Map<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x].clone()
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Map<U> {
        Map {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Map<T> {
        assert!(top + height <= self.height && left + width <= self.width);
        Map::from_fn(height, width, |y, x| self.get(top + y, left + x))
    }
}

impl BinaryMap {
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

pub(crate) fn check_dims<A: Clone, B: Clone>(a: &Map<A>, b: &Map<B>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}
