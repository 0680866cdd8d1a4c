//! Sample pairs, value-range mapping, dataset ingestion, augmentation and
//! the synthetic vessel phantom generator.

mod augment;
mod io;
mod phantom;

pub use augment::{augment, augment_with, AugmentParams, AugmentPolicy};
pub use io::{
    load_manifest, read_image, read_plane, read_plane_f32, write_manifest, write_plane_f32, write_plane_pgm,
    write_plane_png, write_rgb, ManifestRow,
};
pub use phantom::{gen_phantom, PhantomConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-channel H×W map stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape("plane", format!("{height}x{width} with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// As a [1,1,H,W] tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.data.clone()).expect("plane dims are consistent")
    }

    /// From a [1,1,H,W] tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4("plane")?;
        if n != 1 || c != 1 {
            return Err(Error::shape("plane", format!("expected [1,1,H,W], got {:?}", t.shape())));
        }
        Self::new(h, w, t.data().to_vec())
    }
}

/// Three-channel H×W image stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 || height == 0 || width == 0 {
            return Err(Error::shape("rgb image", format!("{height}x{width}x3 with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Planar [1,3,H,W] tensor of the raw values.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c];
            }
        }
        Tensor::new(&[1, 3, self.height, self.width], out).expect("image dims are consistent")
    }
}

/// Fundus image, binary vessel label and optional field-of-view mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image: RgbImage,
    pub label: Plane,
    pub mask: Option<Plane>,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        let dims = self.image.dims();
        if self.label.dims() != dims || self.mask.as_ref().is_some_and(|m| m.dims() != dims) {
            return Err(Error::shape("sample pair", format!("{}: image, label and mask sizes differ", self.id)));
        }
        if !self.label.is_binary() || self.mask.as_ref().is_some_and(|m| !m.is_binary()) {
            return Err(Error::Config(format!("{}: label and mask must be binary", self.id)));
        }
        Ok(())
    }

    /// Image and label as model-range tensors ([1,3,H,W] and [1,1,H,W]).
    pub fn model_tensors(&self) -> Result<(Tensor, Tensor)> {
        let mut x = self.image.to_tensor();
        to_model_range_in_place(x.data_mut())?;
        let mut y = self.label.to_tensor();
        to_model_range_in_place(y.data_mut())?;
        Ok((x, y))
    }
}

/// Maps `[0,1]` to `[−1,1]` via `2v − 1`.
pub fn to_model_range(v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::OutOfRange { value: v, range: "[0, 1]" });
    }
    Ok(2.0 * v - 1.0)
}

/// Maps `[−1,1]` to `[0,1]` via `(v + 1)/2`.
pub fn from_model_range(v: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&v) {
        return Err(Error::OutOfRange { value: v, range: "[-1, 1]" });
    }
    Ok((v + 1.0) / 2.0)
}

pub fn to_model_range_in_place(values: &mut [f64]) -> Result<()> {
    for v in values.iter_mut() {
        *v = to_model_range(*v)?;
    }
    Ok(())
}

pub fn from_model_range_in_place(values: &mut [f64]) -> Result<()> {
    for v in values.iter_mut() {
        *v = from_model_range(*v)?;
    }
    Ok(())
}
