use crate::error::{arg, Result};
use crate::imaging::GrayImage;

/// Dense `f64` tensor: `(channels, height, width)` for feature maps or
/// `(length,)` for vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 || shape.contains(&0) {
            return Err(arg(format!("unsupported tensor shape {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(arg(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(arg("tensor values must be finite"));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Single-channel input from an image; intensities are shifted to
    /// `[-0.5, 0.5]`.
    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            shape: vec![1, img.height(), img.width()],
            data: img.data().iter().map(|v| v - 0.5).collect(),
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}
