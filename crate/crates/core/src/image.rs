use crate::data::DataError;
use crate::tensor::{Scalar, Tensor};

/// C×H×W pixel grid, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if channels * height * width != data.len() || channels == 0 || height == 0 || width == 0 {
            return Err(DataError::Shape(format!(
                "{channels}×{height}×{width} image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty image");
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane_len();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane_len();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clipped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }

    /// Sum of squared pixel values.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|&v| v as f64 * v as f64).sum()
    }

    /// Stack equally sized images into an N×C×H×W tensor.
    pub fn batch_tensor<'a, T: Scalar>(images: impl IntoIterator<Item = &'a Image>) -> Tensor<T> {
        let mut data = Vec::new();
        let mut n = 0;
        let mut dims = None;
        for img in images {
            let d = (img.channels, img.height, img.width);
            assert!(dims.is_none_or(|x| x == d), "batch images must share a shape");
            dims = Some(d);
            data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
            n += 1;
        }
        let (c, h, w) = dims.expect("empty batch");
        Tensor::new(vec![n, c, h, w], data).expect("consistent batch shape")
    }
}
